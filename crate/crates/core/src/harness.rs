//! The experiment commands behind the `safe` binary. Each one validates the
//! whole configuration before reading data or writing anything.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::autodiff::gradcheck::primitive_suite;
use crate::autodiff::Fault;
use crate::config::{derive_seed, RunConfig, STREAM_GRAD_CHECK, STREAM_INIT, STREAM_SHUFFLE, STREAM_TEST_DATA, STREAM_TRAIN_DATA};
use crate::dataset::{read_manifest, read_split, write_dataset};
use crate::error::{Error, Result};
use crate::fusion::{ablation_patterns, AblationSwitches};
use crate::model::{model_grad_check, GroupCheck, PreparedInput, SafeModel};
use crate::synth::{synth_dataset, SynthSample};
use crate::text::render_prompt;
use crate::trainer::{evaluate, ranking, train, EpochRecord, Metrics};

pub const METRIC_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// Which part of the data a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SynthSample>> {
    if let Some(dir) = &cfg.data_dir {
        let manifest = read_manifest(dir)?;
        if manifest.labels.len() != cfg.data.classes {
            return Err(Error::Validation(format!(
                "{} holds {} classes, the configuration expects {}",
                dir.display(),
                manifest.labels.len(),
                cfg.data.classes
            )));
        }
        return Ok(read_split(dir, &manifest, split.name())?
            .into_iter()
            .map(|s| SynthSample {
                clip: s.clip,
                events: s.events,
                label: s.label,
            })
            .collect());
    }
    let (spec, stream) = match split {
        Split::Train => (cfg.data.clone(), STREAM_TRAIN_DATA),
        Split::Test => (cfg.test_spec(), STREAM_TEST_DATA),
    };
    synth_dataset(&spec, derive_seed(cfg.seed, stream))
}

/// Encoder-ready inputs for one split.
pub fn prepared_split(cfg: &RunConfig, split: Split) -> Result<Vec<PreparedInput>> {
    load_split(cfg, split)?
        .iter()
        .map(|c| PreparedInput::new(&c.clip, &c.events, c.label, &cfg.model, cfg.zero_events))
        .collect()
}

pub fn build_model(cfg: &RunConfig) -> Result<SafeModel> {
    SafeModel::new(&cfg.model, &cfg.labels()?, derive_seed(cfg.seed, STREAM_INIT))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Trained model plus its log and held-out metrics.
pub struct TrainOutcome {
    pub model: SafeModel,
    pub log: Vec<EpochRecord>,
    pub eval: Metrics,
}

/// Trains with `switches` on the configured data and evaluates on the
/// held-out split.
pub fn train_and_evaluate(cfg: &RunConfig, switches: AblationSwitches, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = prepared_split(cfg, Split::Train)?;
    let test_set = prepared_split(cfg, Split::Test)?;
    let mut model = build_model(cfg)?;
    let log = train(
        &mut model,
        &train_set,
        Some(&test_set),
        &cfg.optim,
        switches,
        derive_seed(cfg.seed, STREAM_SHUFFLE),
        on_epoch,
    )?;
    let eval = evaluate(&model, &test_set, switches)?;
    Ok(TrainOutcome { model, log, eval })
}

/// Token counts along the fusion path for `frames` frames.
pub fn shape_report(cfg: &RunConfig, frames: usize) -> Value {
    let (v, e) = (cfg.model.rgb.tokens_per_frame(), cfg.model.event.tokens_per_frame());
    let l = cfg.data.classes;
    json!({
        "frames": frames,
        "tokens_per_frame": v,
        "vision_tokens": frames * v,
        "event_tokens": frames * e,
        "text_tokens": l,
        "fused_tokens": frames * (v + e),
        "classifier_tokens": frames * (v + e) + 2 * l,
        "dim": cfg.model.fusion.dim,
    })
}

pub fn synth_data(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let train = synth_dataset(&cfg.data, derive_seed(cfg.seed, STREAM_TRAIN_DATA))?;
    let test = synth_dataset(&cfg.test_spec(), derive_seed(cfg.seed, STREAM_TEST_DATA))?;
    let m = write_dataset(&cfg.out_dir, &cfg.data, cfg.seed, &train, &test, cfg.event_format)?;
    Ok(json!({
        "out_dir": cfg.out_dir,
        "train_samples": train.len(),
        "test_samples": test.len(),
        "train_histogram": m.train_histogram,
        "test_histogram": m.test_histogram,
    }))
}

fn log_line(r: &EpochRecord) -> String {
    serde_json::to_string(r).expect("record is serializable")
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    create_out(&cfg.out_dir)?;
    let out = train_and_evaluate(cfg, cfg.switches, |r| eprintln!("{}", log_line(r)))?;
    let mut log = String::new();
    for r in &out.log {
        writeln!(log, "{}", log_line(r)).expect("string write");
    }
    write_text(&cfg.out_dir.join(METRIC_LOG), &log)?;
    out.model.store.save_checkpoint(&cfg.out_dir.join(CHECKPOINT))?;
    write_text(&cfg.out_dir.join("config.json"), &cfg.to_json())?;
    write_json(&cfg.out_dir.join("model_shape.json"), &shape_report(cfg, cfg.data.frames))?;
    let last = out.log.last().map(EpochRecord::without_timing);
    Ok(json!({
        "checkpoint": cfg.out_dir.join(CHECKPOINT),
        "epochs": out.log.len(),
        "final": last,
        "eval_top1": out.eval.top1,
        "eval_top5": out.eval.top5,
    }))
}

fn load_trained(cfg: &RunConfig, checkpoint: &Path) -> Result<SafeModel> {
    let mut model = build_model(cfg)?;
    model.store.load_checkpoint(checkpoint)?;
    Ok(model)
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Value> {
    cfg.validate()?;
    let model = load_trained(cfg, checkpoint)?;
    let data = prepared_split(cfg, split)?;
    let m = evaluate(&model, &data, cfg.switches)?;
    create_out(&cfg.out_dir)?;
    let metrics = json!({
        "split": split,
        "samples": data.len(),
        "top1": m.top1,
        "top5": m.top5,
        "per_class_accuracy": m.per_class_accuracy,
        "confusion": m.confusion,
        "labels": model.labels,
    });
    write_json(&cfg.out_dir.join("eval_metrics.json"), &metrics)?;
    let top5: Vec<Value> = m
        .samples
        .iter()
        .map(|s| {
            let best: Vec<Value> = ranking(&s.probs)
                .into_iter()
                .take(5)
                .map(|c| json!({"class": c, "label": model.labels[c], "score": s.probs[c]}))
                .collect();
            json!({
                "sample": s.index,
                "label": s.label,
                "top5": best,
                "score_sum": s.probs.iter().sum::<f64>(),
            })
        })
        .collect();
    write_json(&cfg.out_dir.join("top5.json"), &top5)?;
    Ok(metrics)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seeds used for the rows of `ablate`; the first equals the run seed so
/// the all-on row reproduces `train`.
pub fn ablation_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.ablation_seeds as u64).map(|r| cfg.seed.wrapping_add(r)).collect()
}

pub fn ablate(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for switches in ablation_patterns() {
        let mut top1 = Vec::new();
        let seeds = ablation_seeds(cfg);
        for &seed in &seeds {
            let run = RunConfig {
                seed,
                switches,
                ..cfg.clone()
            };
            top1.push(train_and_evaluate(&run, switches, |_| {})?.eval.top1);
        }
        let (mean, sd) = mean_sd(&top1);
        rows.push(json!({
            "pattern": switches.pattern(),
            "switches": switches,
            "seeds": seeds,
            "eval_top1": top1,
            "mean": mean,
            "sd": sd,
        }));
    }
    let table = json!({ "rows": rows });
    create_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("ablation.json"), &table)?;
    Ok(table)
}

pub fn sweep_frames(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.frame_counts {
        let mut run = cfg.clone();
        run.data.frames = n;
        run.data_dir = None;
        let out = train_and_evaluate(&run, run.switches, |_| {})?;
        let mut row = shape_report(&run, n);
        row["eval_top1"] = json!(out.eval.top1);
        row["eval_top5"] = json!(out.eval.top5);
        rows.push(row);
    }
    let table = json!({ "rows": rows });
    create_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("sweep_frames.json"), &table)?;
    Ok(table)
}

pub fn sweep_prompts(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for template in &cfg.prompt_templates {
        let mut run = cfg.clone();
        run.model.text.template = template.clone();
        let example = render_prompt(&run.model.text.prompt_template()?, &run.labels()?[0])?;
        let out = train_and_evaluate(&run, run.switches, |_| {})?;
        rows.push(json!({
            "template": template,
            "example_prompt": example,
            "eval_top1": out.eval.top1,
            "eval_top5": out.eval.top5,
        }));
    }
    let table = json!({ "rows": rows });
    create_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("sweep_prompts.json"), &table)?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub fault: Option<Fault>,
    pub primitive_tolerance: f64,
    pub model_tolerance: f64,
    pub primitives: Vec<Value>,
    pub groups: Vec<GroupCheck>,
    pub failures: Vec<String>,
    pub pass: bool,
}

/// Primitive and end-to-end finite-difference checks. Writes
/// `grad_check.json` and returns a verification error naming the failing
/// primitives or parameters.
pub fn grad_check(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let gc = &cfg.grad_check;
    let seed = derive_seed(cfg.seed, STREAM_GRAD_CHECK);
    let mut failures = Vec::new();
    let primitives: Vec<Value> = primitive_suite(gc.fault, gc.primitive_eps, seed)?
        .into_iter()
        .map(|p| {
            let pass = p.max_rel_error < gc.primitive_tolerance;
            if !pass {
                failures.push(format!("primitive {} ({:.3e})", p.name, p.max_rel_error));
            }
            json!({"name": p.name, "max_rel_error": p.max_rel_error, "pass": pass})
        })
        .collect();
    let model = build_model(cfg)?;
    let sample = prepared_split(cfg, Split::Train)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("no training sample to check"))?;
    let groups = model_grad_check(&model, &sample, gc.model, seed, gc.fault)?;
    for g in &groups {
        if !(g.max_rel_error < gc.model_tolerance) {
            failures.push(format!("{} ({:.3e})", g.worst, g.max_rel_error));
        }
    }
    let report = GradCheckReport {
        fault: gc.fault,
        primitive_tolerance: gc.primitive_tolerance,
        model_tolerance: gc.model_tolerance,
        primitives,
        groups,
        pass: failures.is_empty(),
        failures,
    };
    create_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("grad_check.json"), &report)?;
    Ok(report)
}

pub fn grad_check_cmd(cfg: &RunConfig) -> Result<Value> {
    let report = grad_check(cfg)?;
    if !report.pass {
        return Err(Error::Verification(format!(
            "gradient check failed for: {}",
            report.failures.join(", ")
        )));
    }
    Ok(serde_json::to_value(&report)?)
}

pub fn dump_embeddings(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Value> {
    cfg.validate()?;
    let model = load_trained(cfg, checkpoint)?;
    let data = prepared_split(cfg, split)?;
    let dim = cfg.model.fusion.dim;
    let mut csv = String::from("sample_id,label");
    for j in 0..dim {
        write!(csv, ",f{j}").expect("string write");
    }
    csv.push('\n');
    for (i, x) in data.iter().enumerate() {
        let (_, pooled) = model.predict(x, cfg.switches)?;
        write!(csv, "{}_{i:05},{}", split.name(), x.label).expect("string write");
        for v in pooled {
            write!(csv, ",{v:e}").expect("string write");
        }
        csv.push('\n');
    }
    create_out(&cfg.out_dir)?;
    let path: PathBuf = cfg.out_dir.join(format!("embeddings_{}.csv", split.name()));
    write_text(&path, &csv)?;
    Ok(json!({"path": path, "rows": data.len(), "dim": dim}))
}
