//! RGB frames are a flat gray, so motion is visible only in the events.
//! Trains with real event images and with blank ones and compares held-out
//! accuracy with chance.
//!
//! cargo run --release --example events_only -- [epochs] [seed]

use safe_fusion::config::RunConfig;
use safe_fusion::harness::train_and_evaluate;
use safe_fusion::synth::RgbMode;

fn main() -> safe_fusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig { seed, test_samples_per_class: 16, ..RunConfig::default() };
    cfg.data.rgb_mode = RgbMode::Blank;
    cfg.optim.epochs = epochs;
    println!("chance {:.3}", 1.0 / cfg.data.classes as f64);
    for zero_events in [false, true] {
        let cfg = RunConfig { zero_events, ..cfg.clone() };
        let run = train_and_evaluate(&cfg, cfg.switches, |_| {})?;
        println!("zero_events = {zero_events:<5}  held-out top1 {:.3}", run.eval.top1);
    }
    Ok(())
}
