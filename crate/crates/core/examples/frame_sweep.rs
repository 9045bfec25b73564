//! Trains with 1, 3, 5 and 7 frames per clip and reports token counts and
//! held-out accuracy for each.
//!
//! cargo run --release --example frame_sweep -- [epochs]

use safe_fusion::config::RunConfig;
use safe_fusion::harness::sweep_frames;

fn main() -> safe_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = RunConfig {
        out_dir: std::env::temp_dir().join("safe_frame_sweep_demo"),
        ..RunConfig::default()
    };
    cfg.optim.epochs = epochs;
    let table = sweep_frames(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}
