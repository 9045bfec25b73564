//! The run description shared by every command, with one validation pass.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Fault;
use crate::error::{Error, Result};
use crate::events::EventFormat;
use crate::fusion::AblationSwitches;
use crate::model::{ModelConfig, ModelGradCheck};
use crate::synth::SynthSpec;
use crate::text::{read_labels, PromptTemplate};
use crate::trainer::OptimConfig;

/// Prompt templates compared by `sweep-prompts`.
pub fn prompt_sweep_templates() -> Vec<String> {
    [
        "This is a picture about Picture of {}",
        "The action in the picture is {}",
        "A photo of a {}",
        "The content of the playing card is {}",
        "NONE",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub primitive_eps: f64,
    pub primitive_tolerance: f64,
    pub model: ModelGradCheck,
    pub model_tolerance: f64,
    /// Deliberately broken backward rule, for checking that the check fails.
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            primitive_eps: 1e-5,
            primitive_tolerance: 1e-6,
            model: ModelGradCheck::default(),
            model_tolerance: 1e-3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: SynthSpec,
    /// Held-out clips per class, generated from a seed derived from `seed`.
    pub test_samples_per_class: usize,
    pub event_format: EventFormat,
    /// Feed blank event images to the event encoder.
    pub zero_events: bool,
    /// Read clips written by `synth-data` from here instead of generating them.
    pub data_dir: Option<PathBuf>,
    /// Class names, one per line, replacing the synthetic motion labels.
    pub labels_file: Option<PathBuf>,
    pub model: ModelConfig,
    pub switches: AblationSwitches,
    pub optim: OptimConfig,
    /// Seeds per row in `ablate`.
    pub ablation_seeds: usize,
    pub frame_counts: Vec<usize>,
    pub prompt_templates: Vec<String>,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: SynthSpec::default(),
            test_samples_per_class: 8,
            event_format: EventFormat::Csv,
            zero_events: false,
            data_dir: None,
            labels_file: None,
            model: ModelConfig::default(),
            switches: AblationSwitches::all_on(),
            optim: OptimConfig::default(),
            ablation_seeds: 3,
            frame_counts: vec![1, 3, 5, 7],
            prompt_templates: prompt_sweep_templates(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serializable")
    }

    /// All constraint violations in one message.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.data.validate() {
            problems.push(format!("data: {}", inner_message(&e)));
        }
        if self.test_samples_per_class == 0 {
            problems.push("test_samples_per_class must be at least 1".into());
        }
        problems.extend(self.model.problems());
        problems.extend(self.optim.problems());
        if self.ablation_seeds == 0 {
            problems.push("ablation_seeds must be at least 1".into());
        }
        if self.frame_counts.is_empty() || self.frame_counts.contains(&0) {
            problems.push("frame_counts must be a non-empty list of positive counts".into());
        }
        if self.prompt_templates.is_empty() {
            problems.push("prompt_templates must not be empty".into());
        }
        for t in &self.prompt_templates {
            if let Err(e) = PromptTemplate::parse(t) {
                problems.push(inner_message(&e));
            }
        }
        let gc = &self.grad_check;
        if !(gc.primitive_eps > 0.0 && gc.primitive_eps <= 1e-2) || !(gc.model.eps > 0.0 && gc.model.eps <= 1e-2) {
            problems.push("grad_check eps values must lie in (0, 1e-2]".into());
        }
        if problems.is_empty() {
            self.labels().map(|_| ())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Labels of the configured classes, in class-index order.
    pub fn labels(&self) -> Result<Vec<String>> {
        let Some(path) = &self.labels_file else {
            return Ok(self.data.labels());
        };
        let labels = read_labels(path)?;
        if labels.len() != self.data.classes {
            return Err(Error::Config(format!(
                "{} lists {} labels, data.classes is {}",
                path.display(),
                labels.len(),
                self.data.classes
            )));
        }
        Ok(labels)
    }

    pub fn test_spec(&self) -> SynthSpec {
        SynthSpec {
            samples_per_class: self.test_samples_per_class,
            ..self.data.clone()
        }
    }
}

fn inner_message(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Contract(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Independent seed streams derived from the run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_TRAIN_DATA: u64 = 1;
pub const STREAM_TEST_DATA: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_GRAD_CHECK: u64 = 5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "data": {"frames": 5}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.frames, 5);
        assert_eq!(cfg.data.classes, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"optim": {"epochz": 3}}"#), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.model.fusion.dim = 48;
        cfg.data.classes = 1;
        cfg.optim.batch_size = 0;
        cfg.prompt_templates.push("two {} {}".into());
        let Err(Error::Config(msg)) = cfg.validate() else { panic!() };
        for needle in ["rgb.dim", "data:", "batch_size", "exactly one"] {
            assert!(msg.contains(needle), "{needle} missing from {msg}");
        }
    }

    #[test]
    fn labels_file_renames_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        std::fs::write(&path, "heart 3\nclub 7\nspade 2\ndiamond 9\n").unwrap();
        let mut cfg = RunConfig { labels_file: Some(path.clone()), ..RunConfig::default() };
        assert_eq!(cfg.labels().unwrap()[1], "club 7");
        cfg.data.classes = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        std::fs::write(&path, "a\na\nb\nc\n").unwrap();
        assert!(matches!(RunConfig { labels_file: Some(path), ..RunConfig::default() }.labels(), Err(Error::Parse { record: 2, .. })));
        let missing = RunConfig { labels_file: Some(dir.path().join("none.txt")), ..RunConfig::default() };
        assert!(matches!(missing.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(0, STREAM_TRAIN_DATA), derive_seed(0, STREAM_TEST_DATA));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
