//! Bins a synthetic clip's events onto its frame stamps and prints each
//! event image as ASCII ('+' ON, '-' OFF, '#' both).
//!
//! cargo run --release --example event_stacking -- [class 0-11]

use safe_fusion::events::stack_counts;
use safe_fusion::synth::{synth_dataset, SynthSpec};

fn main() -> safe_fusion::Result<()> {
    let class: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec { classes: 12, samples_per_class: 1, ..SynthSpec::default() };
    let sample = synth_dataset(&spec, 5)?.swap_remove(class.min(11));
    println!("{}: {} events", spec.labels()[sample.label], sample.events.len());
    let counts = stack_counts(&sample.events, sample.clip.timestamps(), sample.events.resolution())?;
    for (k, c) in counts.iter().enumerate() {
        println!("\nframe {k} (t = {} us): {} events, max count {}", sample.clip.timestamps()[k], c.total(), c.max());
        for y in 0..c.height {
            let row: String = (0..c.width)
                .map(|x| match (c.on[y * c.width + x] > 0, c.off[y * c.width + x] > 0) {
                    (true, true) => '#',
                    (true, false) => '+',
                    (false, true) => '-',
                    _ => '.',
                })
                .collect();
            println!("  {row}");
        }
    }
    let total: u64 = counts.iter().map(|c| c.total()).sum();
    println!("\ncounted {total} of {} events", sample.events.len());
    Ok(())
}
