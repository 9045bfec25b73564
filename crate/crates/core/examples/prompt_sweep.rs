//! Trains once per prompt template and compares held-out accuracy.
//!
//! cargo run --release --example prompt_sweep -- [epochs]

use safe_fusion::config::RunConfig;
use safe_fusion::harness::sweep_prompts;

fn main() -> safe_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = RunConfig {
        out_dir: std::env::temp_dir().join("safe_prompt_sweep_demo"),
        ..RunConfig::default()
    };
    cfg.optim.epochs = epochs;
    let table = sweep_prompts(&cfg)?;
    for row in table["rows"].as_array().into_iter().flatten() {
        println!(
            "top1 {:.3}  top5 {:.3}  {:?}",
            row["eval_top1"].as_f64().unwrap_or(f64::NAN),
            row["eval_top5"].as_f64().unwrap_or(f64::NAN),
            row["example_prompt"].as_str().unwrap_or("")
        );
    }
    Ok(())
}
