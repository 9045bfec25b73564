//! On-disk clip datasets: one directory per sample holding PPM frames, an
//! event file and `sample.json`, plus a top-level `dataset.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{parse_events, write_events, EventFormat, EventStream, VideoClip};
use crate::image::Image;
use crate::synth::{SynthSample, SynthSpec};

pub const MANIFEST: &str = "dataset.json";
pub const SAMPLE_MANIFEST: &str = "sample.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: String,
    /// Sample directory relative to the dataset root.
    pub dir: String,
    pub label: usize,
    pub label_name: String,
    pub timestamps: Vec<i64>,
    pub resolution: (u16, u16),
    pub event_file: String,
    pub event_format: EventFormat,
    pub event_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub labels: Vec<String>,
    pub seed: u64,
    pub spec: SynthSpec,
    /// Samples per class, per split.
    pub train_histogram: Vec<usize>,
    pub test_histogram: Vec<usize>,
    pub samples: Vec<SampleRecord>,
}

/// A clip read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub split: String,
    pub clip: VideoClip,
    pub events: EventStream,
    pub label: usize,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn histogram(samples: &[SynthSample], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}

fn write_split(
    root: &Path,
    split: &str,
    samples: &[SynthSample],
    labels: &[String],
    format: EventFormat,
) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{split}_{i:05}");
        let rel = format!("{split}/{id}");
        let dir = root.join(&rel);
        create_dir(&dir)?;
        for (k, frame) in s.clip.frames().iter().enumerate() {
            frame.write_ppm(&dir.join(format!("frame_{k:03}.ppm")))?;
        }
        let event_file = format!("events.{}", format.extension());
        write_events(&s.events, &dir.join(&event_file), format)?;
        let record = SampleRecord {
            id,
            split: split.to_string(),
            dir: rel,
            label: s.label,
            label_name: labels[s.label].clone(),
            timestamps: s.clip.timestamps().to_vec(),
            resolution: s.events.resolution(),
            event_file,
            event_format: format,
            event_count: s.events.len(),
        };
        write_json(&dir.join(SAMPLE_MANIFEST), &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Writes both splits under `root/train` and `root/test` and the manifest.
pub fn write_dataset(
    root: &Path,
    spec: &SynthSpec,
    seed: u64,
    train: &[SynthSample],
    test: &[SynthSample],
    format: EventFormat,
) -> Result<DatasetManifest> {
    create_dir(root)?;
    let labels = spec.labels();
    let mut samples = write_split(root, "train", train, &labels, format)?;
    samples.extend(write_split(root, "test", test, &labels, format)?);
    let manifest = DatasetManifest {
        train_histogram: histogram(train, labels.len()),
        test_histogram: histogram(test, labels.len()),
        labels,
        seed,
        spec: spec.clone(),
        samples,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample of `split` listed in the manifest, in manifest order.
pub fn read_split(root: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<StoredSample>> {
    manifest
        .samples
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let dir: PathBuf = root.join(&r.dir);
            let frames = (0..r.timestamps.len())
                .map(|k| Image::read_ppm(&dir.join(format!("frame_{k:03}.ppm"))))
                .collect::<Result<Vec<_>>>()?;
            if r.label >= manifest.labels.len() {
                return Err(Error::Validation(format!("{}: label {} out of range", r.id, r.label)));
            }
            let events = parse_events(&dir.join(&r.event_file), r.event_format, r.resolution)?;
            Ok(StoredSample {
                split: r.split.clone(),
                clip: VideoClip::new(frames, r.timestamps.clone()).map_err(|e| Error::Validation(e.to_string()))?,
                events,
                label: r.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_dataset;

    #[test]
    fn dataset_roundtrip_keeps_events_and_labels() {
        let spec = SynthSpec {
            samples_per_class: 2,
            resolution: 16,
            ..SynthSpec::default()
        };
        let train = synth_dataset(&spec, 1).unwrap();
        let test = synth_dataset(&SynthSpec { samples_per_class: 1, ..spec.clone() }, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for format in [EventFormat::Csv, EventFormat::Binary] {
            let root = dir.path().join(format.extension());
            let m = write_dataset(&root, &spec, 1, &train, &test, format).unwrap();
            assert_eq!(m.train_histogram, vec![2; 4]);
            assert_eq!(m.test_histogram, vec![1; 4]);
            let m = read_manifest(&root).unwrap();
            let back = read_split(&root, &m, "train").unwrap();
            assert_eq!(back.len(), 8);
            for (a, b) in back.iter().zip(&train) {
                assert_eq!(a.events, b.events);
                assert_eq!(a.label, b.label);
                assert_eq!(a.clip.timestamps(), b.clip.timestamps());
                for (fa, fb) in a.clip.frames().iter().zip(b.clip.frames()) {
                    let err = fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(err <= 0.5 / 255.0 + 1e-12);
                }
            }
            assert_eq!(read_split(&root, &m, "test").unwrap().len(), 4);
        }
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Io { .. })));
    }
}
