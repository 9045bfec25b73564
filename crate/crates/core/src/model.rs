//! The assembled network: two frame encoders, the prompt branch and the
//! fusion head over one parameter store.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::finite_diff_errors;
use crate::autodiff::{Activation, Fault, Graph, Tensor};
use crate::encoders::{clip_patches, encode_clip, EncoderConfig, EncoderParams, Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::events::{stack_events, EventStream, VideoClip};
use crate::fusion::{fuse_and_classify, AblationSwitches, FusionConfig, FusionParams, HeadOutput};
use crate::nn::Session;
use crate::params::{Binder, ParamId, ParamInit, ParamStore};
use crate::text::{encode_labels, render_prompt, PromptTemplate, TextBranchParams, TextConfig, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rgb: EncoderConfig,
    pub event: EncoderConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rgb: EncoderConfig::default(),
            event: EncoderConfig::default(),
            text: TextConfig::default(),
            fusion: FusionConfig::default(),
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// Every cross-module constraint, reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, enc) in [("rgb", &self.rgb), ("event", &self.event)] {
            if let Err(e) = enc.validate(name) {
                out.push(e.to_string());
            }
            if enc.dim != self.fusion.dim {
                out.push(format!(
                    "{name}.dim {} must equal fusion.dim {}",
                    enc.dim, self.fusion.dim
                ));
            }
        }
        let d = self.fusion.dim;
        if self.fusion.heads == 0 || d % self.fusion.heads != 0 {
            out.push(format!("fusion.dim {d} must be divisible by fusion.heads {}", self.fusion.heads));
        }
        if self.fusion.mlp_ratio == 0 {
            out.push("fusion.mlp_ratio must be positive".into());
        }
        if self.text.heads == 0 || d % self.text.heads != 0 {
            out.push(format!("fusion.dim {d} must be divisible by text.heads {}", self.text.heads));
        }
        if self.text.max_len == 0 {
            out.push("text.max_len must be at least 1".into());
        }
        if let Err(e) = self.text.prompt_template() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Patch matrices for one clip and its event images, ready for the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub rgb: Vec<Tensor>,
    pub events: Vec<Tensor>,
    pub label: usize,
}

impl PreparedInput {
    /// Stacks events onto the clip's frame stamps; `zero_events` replaces
    /// the event images with blanks of the same shape.
    pub fn new(clip: &VideoClip, events: &EventStream, label: usize, cfg: &ModelConfig, zero_events: bool) -> Result<Self> {
        if clip.is_empty() {
            return Err(Error::contract("clip has no frames"));
        }
        let mut stacked = stack_events(events, clip.timestamps(), events.resolution())?;
        if zero_events {
            stacked = stacked.zeroed();
        }
        Ok(PreparedInput {
            rgb: clip_patches(clip.frames(), &cfg.rgb)?,
            events: clip_patches(&stacked.to_three_channel(), &cfg.event)?,
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.rgb.len()
    }
}

/// Loss, logits and per-parameter gradients for one sample.
pub struct SampleOutcome {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct SafeModel {
    pub cfg: ModelConfig,
    pub labels: Vec<String>,
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub rgb: EncoderParams,
    pub event: EncoderParams,
    pub text: TextBranchParams,
    pub fusion: FusionParams,
}

impl SafeModel {
    pub fn new(cfg: &ModelConfig, labels: &[String], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if labels.len() < 2 {
            return Err(Error::Config("at least two class labels are required".into()));
        }
        let template = cfg.text.prompt_template()?;
        let prompts = labels
            .iter()
            .map(|l| render_prompt(&template, l))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::build(&prompts);
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, seed);
        let rgb = EncoderParams::new(&mut init, "rgb", &cfg.rgb)?;
        let event = EncoderParams::new(&mut init, "event", &cfg.event)?;
        let text = TextBranchParams::new(&mut init, &cfg.text, vocab.len(), cfg.fusion.dim)?;
        let fusion = FusionParams::new(&mut init, &cfg.fusion, labels.len())?;
        Ok(SafeModel {
            cfg: cfg.clone(),
            labels: labels.to_vec(),
            template,
            vocab,
            store,
            rgb,
            event,
            text,
            fusion,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.store, self.cfg.activation)
    }

    /// Per-frame encoder outputs joined along the token axis.
    fn encode_stream(
        &self,
        s: &mut Session,
        patches: &[Tensor],
        modality: Modality,
        switches: AblationSwitches,
    ) -> Result<TokenSequence> {
        let (cfg, params) = match modality {
            Modality::Vision => (&self.cfg.rgb, &self.rgb),
            Modality::Event => (&self.cfg.event, &self.event),
            Modality::Text => return Err(Error::contract("text is not a frame stream")),
        };
        let per_frame = encode_clip(s, patches, cfg, params, modality, switches.lvm)?;
        let vars: Vec<_> = per_frame.iter().map(|t| t.tokens).collect();
        Ok(TokenSequence {
            tokens: s.graph.concat_rows(&vars)?,
            modality,
        })
    }

    pub fn forward(&self, s: &mut Session, input: &PreparedInput, switches: AblationSwitches) -> Result<HeadOutput> {
        if input.rgb.len() != input.events.len() {
            return Err(Error::contract("RGB and event frame counts differ"));
        }
        let fv = self.encode_stream(s, &input.rgb, Modality::Vision, switches)?;
        let fe = self.encode_stream(s, &input.events, Modality::Event, switches)?;
        let text = if switches.sci {
            Some(encode_labels(
                s,
                &self.labels,
                &self.template,
                &self.vocab,
                self.cfg.text.max_len,
                &self.text,
            )?)
        } else {
            None
        };
        fuse_and_classify(s, fv, fe, text, &self.fusion, switches)
    }

    /// Logits and the pooled pre-classifier feature.
    pub fn predict(&self, input: &PreparedInput, switches: AblationSwitches) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut s = self.session();
        let out = self.forward(&mut s, input, switches)?;
        Ok((
            s.graph.value(out.logits).data().to_vec(),
            s.graph.value(out.pooled).data().to_vec(),
        ))
    }

    fn outcome(&self, mut s: Session, input: &PreparedInput, switches: AblationSwitches) -> Result<SampleOutcome> {
        let out = self.forward(&mut s, input, switches)?;
        let loss = s.graph.cross_entropy(out.logits, input.label)?;
        s.graph.backward(loss)?;
        Ok(SampleOutcome {
            loss: s.graph.value(loss).data()[0],
            logits: s.graph.value(out.logits).data().to_vec(),
            grads: s.binder.gradients(&s.graph),
        })
    }

    /// Gradients for trainable parameters only; frozen ones come back `None`.
    pub fn loss_and_grads(&self, input: &PreparedInput, switches: AblationSwitches) -> Result<SampleOutcome> {
        self.outcome(self.session(), input, switches)
    }

    /// Gradients for every parameter the forward pass touches, frozen or not.
    pub fn loss_and_all_grads(&self, input: &PreparedInput, switches: AblationSwitches, fault: Option<Fault>) -> Result<SampleOutcome> {
        let graph = fault.map(Graph::with_fault).unwrap_or_default();
        let s = Session::with_graph(graph, Binder::tracking_all(&self.store), self.cfg.activation);
        self.outcome(s, input, switches)
    }

    pub fn loss(&self, input: &PreparedInput, switches: AblationSwitches) -> Result<f64> {
        let mut s = self.session();
        let out = self.forward(&mut s, input, switches)?;
        let loss = s.graph.cross_entropy(out.logits, input.label)?;
        Ok(s.graph.value(loss).data()[0])
    }
}

/// Sub-network a parameter belongs to: the first two name components,
/// e.g. `rgb.blocks` or `fusion.ca_vt`.
pub fn param_group(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub switches: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelGradCheck {
    pub eps: f64,
    pub per_group: usize,
    pub min_total: usize,
    /// Uniform noise half-width added to every weight before checking so
    /// gradients are well above the finite-difference noise floor.
    pub perturb: f64,
}

impl Default for ModelGradCheck {
    fn default() -> Self {
        ModelGradCheck {
            eps: 1e-4,
            per_group: 3,
            min_total: 32,
            perturb: 0.2,
        }
    }
}

/// Central-difference check of the full model loss over coordinates drawn
/// from every parameter group. Groups not reached with all switches on
/// (shallow encoders, free class tokens) are checked in a second pass with
/// `sci` and `lvm` off.
pub fn model_grad_check(
    model: &SafeModel,
    input: &PreparedInput,
    settings: ModelGradCheck,
    seed: u64,
    fault: Option<Fault>,
) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    if settings.perturb > 0.0 {
        for id in probe.store.ids().collect::<Vec<_>>() {
            for v in probe.store.get_mut(id).data_mut() {
                *v += rng.random_range(-settings.perturb..settings.perturb);
            }
        }
    }
    let on = AblationSwitches::all_on();
    let alt = AblationSwitches {
        sci: false,
        lvm: false,
        ..on
    };
    let mut seen = BTreeMap::new();
    let mut results = Vec::new();
    for switches in [on, alt] {
        let out = probe.loss_and_all_grads(input, switches, fault)?;
        let mut groups: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
        for id in probe.store.ids() {
            let group = param_group(&probe.store.entry(id).name);
            if out.grads[id.index()].is_some() && !seen.contains_key(&group) {
                groups.entry(group).or_default().push(id);
            }
        }
        let mut picks: Vec<(String, ParamId, usize)> = Vec::new();
        for (group, ids) in &groups {
            let n = settings.per_group.max(1);
            for _ in 0..n {
                let id = ids[rng.random_range(0..ids.len())];
                let idx = rng.random_range(0..probe.store.get(id).numel());
                picks.push((group.clone(), id, idx));
            }
        }
        if picks.is_empty() {
            continue;
        }
        let x: Vec<f64> = picks.iter().map(|(_, id, i)| probe.store.get(*id).data()[*i]).collect();
        let analytic: Vec<f64> = picks
            .iter()
            .map(|(_, id, i)| out.grads[id.index()].as_ref().expect("picked with gradient")[*i])
            .collect();
        let mut scratch = probe.clone();
        let f = |vals: &[f64]| {
            for ((_, id, i), v) in picks.iter().zip(vals) {
                scratch.store.get_mut(*id).data_mut()[*i] = *v;
            }
            scratch.loss(input, switches)
        };
        let coords: Vec<usize> = (0..picks.len()).collect();
        let errors = finite_diff_errors(f, &x, &analytic, &coords, settings.eps)?;
        for (group, _) in &groups {
            let mut count = 0;
            let mut worst = (f64::NEG_INFINITY, String::new());
            for ((g, id, i), e) in picks.iter().zip(&errors) {
                if g == group {
                    count += 1;
                    if *e > worst.0 {
                        worst = (*e, format!("{}[{i}]", probe.store.entry(*id).name));
                    }
                }
            }
            seen.insert(group.clone(), ());
            results.push(GroupCheck {
                group: group.clone(),
                switches: switches.pattern(),
                coordinates: count,
                max_rel_error: worst.0,
                worst: worst.1,
            });
        }
    }
    let total: usize = results.iter().map(|r| r.coordinates).sum();
    if total < settings.min_total {
        return Err(Error::contract(format!(
            "only {total} coordinates checked, at least {} required",
            settings.min_total
        )));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthSpec};

    fn desk() -> (ModelConfig, Vec<String>, Vec<PreparedInput>) {
        let spec = SynthSpec {
            samples_per_class: 1,
            ..SynthSpec::default()
        };
        let cfg = ModelConfig::default();
        let data = synth_dataset(&spec, 1).unwrap();
        let inputs = data
            .iter()
            .map(|s| PreparedInput::new(&s.clip, &s.events, s.label, &cfg, false).unwrap())
            .collect();
        (cfg, spec.labels(), inputs)
    }

    #[test]
    fn desk_forward_gives_finite_logits() {
        let (cfg, labels, inputs) = desk();
        let model = SafeModel::new(&cfg, &labels, 0).unwrap();
        for sw in crate::fusion::ablation_patterns().into_iter().chain([AblationSwitches::all_off()]) {
            let (logits, pooled) = model.predict(&inputs[0], sw).unwrap();
            assert_eq!(logits.len(), 4);
            assert_eq!(pooled.len(), 64);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn frozen_blocks_get_no_gradient_but_embedding_does() {
        let (cfg, labels, inputs) = desk();
        let model = SafeModel::new(&cfg, &labels, 0).unwrap();
        let out = model.loss_and_grads(&inputs[0], AblationSwitches::all_on()).unwrap();
        for e in model.store.entries().iter().enumerate() {
            let (i, entry) = e;
            if entry.frozen {
                assert!(out.grads[i].is_none(), "{}", entry.name);
            }
        }
        assert!(out.grads[model.rgb.embed.proj.weight.index()].is_some());
        assert!(out.grads[model.text.embedding.index()].as_ref().unwrap().iter().any(|g| *g != 0.0));
        assert!(out.grads[model.fusion.free_tokens.index()].is_none());

        let no_sci = AblationSwitches {
            sci: false,
            ..AblationSwitches::all_on()
        };
        let out = model.loss_and_grads(&inputs[0], no_sci).unwrap();
        assert!(out.grads[model.text.embedding.index()].is_none());
        assert!(out.grads[model.fusion.free_tokens.index()].is_some());
    }

    #[test]
    fn zeroed_events_keep_shapes() {
        let (cfg, _, _) = desk();
        let spec = SynthSpec {
            samples_per_class: 1,
            ..SynthSpec::default()
        };
        let s = &synth_dataset(&spec, 2).unwrap()[0];
        let a = PreparedInput::new(&s.clip, &s.events, 0, &cfg, true).unwrap();
        assert_eq!(a.events.len(), 3);
        assert!(a.events.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn mismatched_dims_are_one_config_error() {
        let mut cfg = ModelConfig::default();
        cfg.rgb.dim = 32;
        cfg.text.template = "no slot".into();
        match cfg.validate() {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("rgb.dim"));
                assert!(msg.contains("exactly one"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn end_to_end_gradients_match_central_differences() {
        let (cfg, labels, inputs) = desk();
        let model = SafeModel::new(&cfg, &labels, 3).unwrap();
        let report = model_grad_check(&model, &inputs[1], ModelGradCheck::default(), 4, None).unwrap();
        let total: usize = report.iter().map(|r| r.coordinates).sum();
        assert!(total >= 32);
        for g in ["rgb.patch", "rgb.blocks", "rgb.shallow", "event.blocks", "text.embedding", "fusion.mt_vt", "fusion.ca_et", "fusion.free_tokens", "fusion.classifier"] {
            assert!(report.iter().any(|r| r.group == g), "missing {g}");
        }
        for r in &report {
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
        let faulty = model_grad_check(&model, &inputs[1], ModelGradCheck::default(), 4, Some(Fault::SoftmaxBackward)).unwrap();
        assert!(faulty.iter().any(|r| r.max_rel_error > 1e-3));
    }

    #[test]
    fn group_names() {
        assert_eq!(param_group("rgb.blocks.0.attn.q.weight"), "rgb.blocks");
        assert_eq!(param_group("fusion.free_tokens"), "fusion.free_tokens");
    }
}
