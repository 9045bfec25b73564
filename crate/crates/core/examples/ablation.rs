//! Trains the six component-ablation variants on a small model and prints
//! held-out top-1 per variant.
//!
//! cargo run --release --example ablation -- [epochs]

use safe_fusion::config::RunConfig;
use safe_fusion::harness::ablate;

fn main() -> safe_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut cfg = RunConfig {
        out_dir: std::env::temp_dir().join("safe_ablation_demo"),
        ablation_seeds: 2,
        ..RunConfig::default()
    };
    cfg.optim.epochs = epochs;
    let table = ablate(&cfg)?;
    for row in table["rows"].as_array().into_iter().flatten() {
        println!(
            "{:<20} top1 {:.3} ± {:.3}  per seed {}",
            row["pattern"].as_str().unwrap_or("?"),
            row["mean"].as_f64().unwrap_or(f64::NAN),
            row["sd"].as_f64().unwrap_or(f64::NAN),
            row["eval_top1"]
        );
    }
    println!("table written to {}", cfg.out_dir.join("ablation.json").display());
    Ok(())
}
