//! AdamW with cosine decay, the epoch loop, and top-k evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::AblationSwitches;
use crate::model::{PreparedInput, SafeModel};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Final learning rate as a fraction of `base_lr`.
    pub schedule_floor_fraction: f64,
    /// Steps of linear ramp-up before the cosine schedule takes full effect.
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 3e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 200,
            batch_size: 16,
            schedule_floor_fraction: 0.1,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    /// Recipe for pretrained full-size encoders.
    pub fn full_scale() -> Self {
        OptimConfig {
            base_lr: 8e-6,
            epochs: 50,
            ..OptimConfig::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            out.push(format!("optim.base_lr must be a finite non-negative number, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            out.push("optim.weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            out.push("optim.betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            out.push("optim.eps must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("optim.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.schedule_floor_fraction) {
            out.push("optim.schedule_floor_fraction must lie in [0, 1)".into());
        }
        out
    }
}

/// `base - (base - floor)(1 - cos(π step / total)) / 2`, exact at both ends.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} exceeds total {total_steps}")));
    }
    let base = cfg.base_lr;
    let floor = base * cfg.schedule_floor_fraction;
    if step == total_steps {
        return Ok(floor);
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(base - (base - floor) * (1.0 - c) / 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam update. Frozen parameters and those
/// without a gradient are left alone.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract("gradient list does not match the parameter store"));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let Some(g) = &grads[i] else { continue };
        if store.entry(id).frozen {
            continue;
        }
        let p = store.get_mut(id).data_mut();
        if g.len() != p.len() {
            return Err(Error::contract(format!(
                "gradient of length {} for a parameter of {} values",
                g.len(),
                p.len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + cfg.eps) + lr * cfg.weight_decay * p[j];
        }
    }
    Ok(())
}

/// Whether `target` is among the `k` largest logits, ties going to the
/// lower class index.
pub fn top_k_hit(logits: &[f64], target: usize, k: usize) -> bool {
    let t = logits[target];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > t || (x == t && j < target))
        .count();
    rank < k
}

/// Class indices sorted by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Rate used at `step`: the cosine value, scaled by `(step + 1) / (w + 1)`
/// during the first `w = warmup_steps` steps.
pub fn scheduled_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64> {
    let lr = cosine_lr(step, total_steps, cfg)?;
    let w = cfg.warmup_steps;
    Ok(if step < w { lr * (step + 1) as f64 / (w + 1) as f64 } else { lr })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub samples: Vec<SampleScores>,
}

/// Top-k metrics from precomputed logits.
pub fn metrics_from_logits(logits: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Metrics> {
    if logits.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let mut samples = Vec::with_capacity(logits.len());
    for (i, (l, &y)) in logits.iter().zip(labels).enumerate() {
        if l.len() != classes || y >= classes {
            return Err(Error::contract("logit width or label out of range"));
        }
        let predicted = ranking(l)[0];
        confusion[y][predicted] += 1;
        hit1 += top_k_hit(l, y, 1) as usize;
        hit5 += top_k_hit(l, y, 5) as usize;
        samples.push(SampleScores {
            index: i,
            label: y,
            predicted,
            probs: softmax(l),
        });
    }
    let n = logits.len() as f64;
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(Metrics {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
        per_class_accuracy,
        confusion,
        samples,
    })
}

pub fn evaluate(model: &SafeModel, data: &[PreparedInput], switches: AblationSwitches) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let logits = data
        .iter()
        .map(|x| model.predict(x, switches).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|x| x.label).collect();
    metrics_from_logits(&logits, &labels, model.classes())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the forward passes made while training this epoch.
    pub train_top1: f64,
    pub eval_top1: Option<f64>,
    pub eval_top5: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// The record without its timing field, for reproducibility checks.
    pub fn without_timing(&self) -> EpochRecord {
        EpochRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// Seeded epoch loop with mean-of-batch gradients. `on_epoch` sees each
/// record as soon as it is complete.
pub fn train(
    model: &mut SafeModel,
    train_set: &[PreparedInput],
    eval_set: Option<&[PreparedInput]>,
    cfg: &OptimConfig,
    switches: AblationSwitches,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let epoch_lr = scheduled_lr(step, total_steps, cfg)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            for &i in batch {
                let out = model.loss_and_grads(&train_set[i], switches)?;
                if !out.loss.is_finite() {
                    return Err(Error::Numeric("training loss"));
                }
                loss_sum += out.loss;
                correct += top_k_hit(&out.logits, train_set[i].label, 1) as usize;
                for (a, g) in acc.iter_mut().zip(out.grads) {
                    let Some(g) = g else { continue };
                    match a {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                        None => *a = Some(g),
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            let lr = scheduled_lr(step, total_steps, cfg)?;
            adamw_step(&mut model.store, &acc, &mut state, lr, cfg)?;
            step += 1;
        }
        let (eval_top1, eval_top5) = match eval_set {
            Some(e) if !e.is_empty() => {
                let m = evaluate(model, e, switches)?;
                (Some(m.top1), Some(m.top5))
            }
            _ => (None, None),
        };
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n,
            train_top1: correct as f64 / n,
            eval_top1,
            eval_top5,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::model::ModelConfig;
    use crate::synth::{synth_dataset, SynthSpec};
    use rand::Rng;

    fn ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
        let l = g.cross_entropy(x, target).unwrap();
        g.backward(l).unwrap();
        (g.value(l).data()[0], g.grad(x).unwrap().data().to_vec())
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for l in [2usize, 4, 10, 114, 300] {
            let (loss, grad) = ce(&vec![0.37; l], 1);
            assert!((loss - (l as f64).ln()).abs() < 1e-9);
            for (j, g) in grad.iter().enumerate() {
                let expected = 1.0 / l as f64 - if j == 1 { 1.0 } else { 0.0 };
                assert!((g - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        assert!(ce(&[30.0, -30.0], 0).0 < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..7);
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let direct = -(logits[t].exp() / z).ln();
            let (loss, grad) = ce(&logits, t);
            assert!((loss - direct).abs() < 1e-12);
            assert!(loss >= 0.0);
            let p = softmax(&logits);
            for j in 0..7 {
                assert!((grad[j] - (p[j] - (j == t) as u8 as f64)).abs() < 1e-9);
            }
        }
    }

    fn one_param(w: f64, frozen: bool) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![1], vec![w]).unwrap(), frozen).unwrap();
        store
    }

    #[test]
    fn first_adamw_step_is_lr_in_gradient_direction() {
        let mut store = one_param(1.0, false);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut state = AdamState::new(&store);
        // f(w) = w²/2, so the gradient at w = 1 is 1.
        adamw_step(&mut store, &[Some(vec![1.0])], &mut state, 0.1, &cfg).unwrap();
        let w = store.entries()[0].tensor.data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut store = one_param(2.0, false);
        let mut state = AdamState::new(&store);
        let no_decay = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        adamw_step(&mut store, &[Some(vec![0.0])], &mut state, 0.1, &no_decay).unwrap();
        assert_eq!(store.entries()[0].tensor.data()[0], 2.0);

        let decay = OptimConfig {
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut store = one_param(2.0, false);
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &[Some(vec![0.0])], &mut state, 0.1, &decay).unwrap();
        assert!((store.entries()[0].tensor.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_ungraded_parameters_are_skipped() {
        let mut store = one_param(1.0, true);
        store.add("u", Tensor::new(vec![1], vec![3.0]).unwrap(), false).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = OptimConfig::default();
        for _ in 0..2 {
            adamw_step(&mut store, &[Some(vec![1.0]), None], &mut state, 0.1, &cfg).unwrap();
        }
        assert_eq!(store.entries()[0].tensor.data()[0], 1.0);
        assert_eq!(store.entries()[1].tensor.data()[0], 3.0);
        let mut s2 = one_param(1.0, false);
        let mut st2 = AdamState::new(&s2);
        assert!(matches!(
            adamw_step(&mut s2, &[Some(vec![1.0, 2.0])], &mut st2, 0.1, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_schedule_values() {
        let cfg = OptimConfig {
            base_lr: 1e-3,
            ..OptimConfig::default()
        };
        assert_eq!(cosine_lr(0, 100, &cfg).unwrap(), 1e-3);
        assert_eq!(cosine_lr(100, 100, &cfg).unwrap(), 1e-3 * 0.1);
        assert!((cosine_lr(50, 100, &cfg).unwrap() - (1e-3 + 1e-4) / 2.0).abs() < 1e-18);
        assert!(matches!(cosine_lr(0, 0, &cfg), Err(Error::Contract(_))));
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn warmup_ramps_then_follows_the_cosine() {
        let cfg = OptimConfig::default();
        for s in 0..=20 {
            assert_eq!(scheduled_lr(s, 20, &cfg).unwrap(), cosine_lr(s, 20, &cfg).unwrap());
        }
        let warm = OptimConfig { warmup_steps: 3, ..cfg };
        assert_eq!(scheduled_lr(0, 20, &warm).unwrap(), cosine_lr(0, 20, &warm).unwrap() / 4.0);
        assert_eq!(scheduled_lr(2, 20, &warm).unwrap(), cosine_lr(2, 20, &warm).unwrap() * 3.0 / 4.0);
        assert_eq!(scheduled_lr(3, 20, &warm).unwrap(), cosine_lr(3, 20, &warm).unwrap());
    }

    #[test]
    fn top_k_ties_go_to_lower_index() {
        assert!(top_k_hit(&[1.0, 1.0, 0.0], 0, 1));
        assert!(!top_k_hit(&[1.0, 1.0, 0.0], 1, 1));
        assert!(top_k_hit(&[0.0, 0.0, 0.0, 0.0], 3, 5));
        assert_eq!(ranking(&[0.5, 2.0, 2.0, -1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn metric_saturation_and_perfect_classifier() {
        let logits: Vec<Vec<f64>> = (0..10).map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let m = metrics_from_logits(&logits, &labels, 4).unwrap();
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.top5, 1.0);
        assert_eq!(m.confusion[1][1], 3);
        assert!(metrics_from_logits(&[], &[], 4).is_err());
    }

    #[test]
    fn random_logits_sit_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<Vec<f64>> = (0..1000).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let m = metrics_from_logits(&logits, &labels, 10).unwrap();
        assert!((0.05..=0.17).contains(&m.top1), "{}", m.top1);
    }

    fn tiny() -> (SafeModel, Vec<PreparedInput>) {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 3,
            resolution: 16,
            frames: 2,
            ..SynthSpec::default()
        };
        let mut cfg = ModelConfig::default();
        for enc in [&mut cfg.rgb, &mut cfg.event] {
            enc.image_size = 16;
            enc.dim = 16;
            enc.depth = 1;
        }
        cfg.fusion.dim = 16;
        let data: Vec<PreparedInput> = synth_dataset(&spec, 2)
            .unwrap()
            .iter()
            .map(|s| PreparedInput::new(&s.clip, &s.events, s.label, &cfg, false).unwrap())
            .collect();
        (SafeModel::new(&cfg, &spec.labels(), 5).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, data) = tiny();
        let before = model.store.clone();
        let cfg = OptimConfig {
            base_lr: 0.0,
            epochs: 2,
            batch_size: 4,
            ..OptimConfig::default()
        };
        train(&mut model, &data, None, &cfg, AblationSwitches::all_on(), 1, |_| {}).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn training_is_reproducible_and_frozen_blocks_stay_put() {
        let cfg = OptimConfig {
            epochs: 2,
            batch_size: 4,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let run = || {
            let (mut model, data) = tiny();
            let log = train(&mut model, &data, Some(&data), &cfg, AblationSwitches::all_on(), 9, |_| {}).unwrap();
            (model, log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a.store, b.store);
        let strip = |l: &[EpochRecord]| l.iter().map(EpochRecord::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&log_a), strip(&log_b));

        let (fresh, _) = tiny();
        for (id, entry) in fresh.store.ids().zip(fresh.store.entries()) {
            let after = a.store.get(id);
            if entry.frozen {
                assert_eq!(after, &entry.tensor, "{}", entry.name);
            }
        }
        assert_ne!(a.store.get(a.rgb.embed.proj.weight), fresh.store.get(fresh.rgb.embed.proj.weight));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let (mut model, _) = tiny();
        assert!(matches!(
            train(&mut model, &[], None, &OptimConfig::default(), AblationSwitches::all_on(), 0, |_| {}),
            Err(Error::Contract(_))
        ));
    }
}
