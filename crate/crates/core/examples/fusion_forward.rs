//! One forward pass through the full model: token counts at each stage,
//! class scores and the attention maps recorded on the tape.
//!
//! cargo run --release --example fusion_forward

use safe_fusion::config::RunConfig;
use safe_fusion::fusion::AblationSwitches;
use safe_fusion::harness::{build_model, prepared_split, shape_report, Split};
use safe_fusion::trainer::softmax;

fn main() -> safe_fusion::Result<()> {
    let cfg = RunConfig::default();
    let model = build_model(&cfg)?;
    let input = &prepared_split(&cfg, Split::Train)?[0];
    println!("{}", serde_json::to_string_pretty(&shape_report(&cfg, input.frames()))?);

    let mut s = model.session();
    let out = model.forward(&mut s, input, AblationSwitches::all_on())?;
    let probs = softmax(s.graph.value(out.logits).data());
    println!("label {} ({}), untrained scores {:.3?}", input.label, cfg.labels()?[input.label], probs);
    let maps: Vec<_> = s.graph.softmax_outputs().collect();
    let worst = maps
        .iter()
        .flat_map(|w| (0..w.rows()).map(move |r| (w.row(r).iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    let mut shapes: Vec<&[usize]> = maps.iter().map(|w| w.shape()).collect();
    shapes.dedup();
    println!("{} attention maps, shapes {shapes:?}, worst row-sum error {worst:.1e}", maps.len());

    for switches in safe_fusion::fusion::ablation_patterns() {
        let (logits, pooled) = model.predict(input, switches)?;
        println!("{:<20} {} logits, pooled width {}", switches.pattern(), logits.len(), pooled.len());
    }
    Ok(())
}
