//! Generates the desk dataset on disk (PPM frames, event files, manifests)
//! and reads the training split back.
//!
//! cargo run --release --example synth_data -- [dir]

use std::path::PathBuf;

use safe_fusion::dataset::{read_manifest, read_split, write_dataset};
use safe_fusion::events::EventFormat;
use safe_fusion::synth::{synth_dataset, SynthSpec};

fn main() -> safe_fusion::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("safe_synth_demo"));
    let spec = SynthSpec::default();
    let train = synth_dataset(&spec, 1)?;
    let test = synth_dataset(&SynthSpec { samples_per_class: 4, ..spec.clone() }, 2)?;
    let manifest = write_dataset(&root, &spec, 1, &train, &test, EventFormat::Binary)?;
    println!("wrote {} samples under {}", manifest.samples.len(), root.display());
    println!("labels {:?}", manifest.labels);
    println!("train histogram {:?}, test histogram {:?}", manifest.train_histogram, manifest.test_histogram);

    let back = read_split(&root, &read_manifest(&root)?, "train")?;
    let events_match = back.iter().zip(&train).all(|(a, b)| a.events == b.events);
    println!("read back {} training clips, event streams identical: {events_match}", back.len());
    Ok(())
}
