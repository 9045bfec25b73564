//! Trains the desk-size model on 64 synthetic clips until it memorizes them.
//!
//! cargo run --release --example overfit -- [epochs]

use safe_fusion::fusion::AblationSwitches;
use safe_fusion::model::{ModelConfig, PreparedInput, SafeModel};
use safe_fusion::synth::{synth_dataset, SynthSpec};
use safe_fusion::trainer::{train, OptimConfig};

fn main() -> safe_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let spec = SynthSpec::default();
    let cfg = ModelConfig::default();
    let inputs = synth_dataset(&spec, 0)?
        .iter()
        .map(|s| PreparedInput::new(&s.clip, &s.events, s.label, &cfg, false))
        .collect::<safe_fusion::Result<Vec<_>>>()?;
    let mut model = SafeModel::new(&cfg, &spec.labels(), 0)?;
    let optim = OptimConfig {
        epochs,
        ..OptimConfig::default()
    };
    let log = train(&mut model, &inputs, None, &optim, AblationSwitches::all_on(), 0, |r| {
        println!(
            "epoch {:3}  lr {:.2e}  loss {:.4}  top1 {:.3}  {} ms",
            r.epoch, r.lr, r.train_loss, r.train_top1, r.wall_ms
        );
    })?;
    let first_perfect = log.iter().find(|r| r.train_top1 == 1.0).map(|r| r.epoch);
    println!("first epoch at 100% train top-1: {first_perfect:?}");
    Ok(())
}
