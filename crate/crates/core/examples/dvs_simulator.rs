//! Log-intensity event simulation on a single stepping pixel and on a
//! rendered moving square.
//!
//! cargo run --release --example dvs_simulator

use safe_fusion::events::{simulate_dvs, Polarity, VideoClip};
use safe_fusion::image::Image;
use safe_fusion::synth::{synth_dataset, SynthSpec};

fn gray(v: f64) -> Image {
    Image::filled(1, 1, 3, v)
}

fn main() -> safe_fusion::Result<()> {
    let clip = VideoClip::new(vec![gray(0.1), gray(0.9)], vec![0, 1000])?;
    let delta = (0.9f64 + 1e-3).ln() - (0.1f64 + 1e-3).ln();
    for threshold in [delta * 1.5, delta / 3.0, delta / 7.5] {
        let events = simulate_dvs(&clip, threshold)?;
        let stamps: Vec<i64> = events.events().iter().map(|e| e.t).collect();
        println!("threshold {threshold:.4}: {} ON events at t = {stamps:?}", events.len());
    }
    let reversed = simulate_dvs(&clip.time_reversed(), delta / 3.0)?;
    println!(
        "time-reversed clip: {} events, all OFF: {}",
        reversed.len(),
        reversed.events().iter().all(|e| e.p == Polarity::Off)
    );

    let sample = &synth_dataset(&SynthSpec { samples_per_class: 1, ..SynthSpec::default() }, 3)?[0];
    let on: Vec<_> = sample.events.events().iter().filter(|e| e.p == Polarity::On).collect();
    println!("\nrendered square moving right: {} events, {} ON", sample.events.len(), on.len());
    for (k, w) in sample.clip.timestamps().windows(2).enumerate() {
        let xs: Vec<f64> = on.iter().filter(|e| e.t >= w[0] && e.t < w[1]).map(|e| e.x as f64).collect();
        println!("  transition {k}: mean ON x = {:.2}", xs.iter().sum::<f64>() / xs.len() as f64);
    }
    Ok(())
}
