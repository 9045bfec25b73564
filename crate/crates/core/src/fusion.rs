//! Frame/event/text fusion: multimodal transformers, vision-event
//! self-attention, text-query cross-attention and the classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoders::{Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{run_blocks, LayerNorm, Linear, Session, TransformerBlock};
use crate::params::{ParamId, ParamInit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    /// Class-name prompts feed the text branch; off swaps in free learned tokens.
    pub sci: bool,
    /// Deep encoder stack; off swaps in the shallow trainable stack.
    pub lvm: bool,
    pub mt: bool,
    pub sa: bool,
    pub ca: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches::all_on()
    }
}

impl AblationSwitches {
    pub fn all_on() -> Self {
        AblationSwitches {
            sci: true,
            lvm: true,
            mt: true,
            sa: true,
            ca: true,
        }
    }

    pub fn all_off() -> Self {
        AblationSwitches {
            sci: false,
            lvm: false,
            mt: false,
            sa: false,
            ca: false,
        }
    }

    /// Compact label such as `sci+lvm-mt+sa+ca`.
    pub fn pattern(&self) -> String {
        let mark = |on: bool| if on { '+' } else { '-' };
        format!(
            "{}sci{}lvm{}mt{}sa{}ca",
            mark(self.sci),
            mark(self.lvm),
            mark(self.mt),
            mark(self.sa),
            mark(self.ca)
        )
    }
}

/// The six component-analysis rows: everything on, then each switch off
/// in turn (SCI, LVM, MT, SA, CA).
pub fn ablation_patterns() -> Vec<AblationSwitches> {
    let on = AblationSwitches::all_on();
    vec![
        on,
        AblationSwitches { sci: false, ..on },
        AblationSwitches { lvm: false, ..on },
        AblationSwitches { mt: false, ..on },
        AblationSwitches { sa: false, ..on },
        AblationSwitches { ca: false, ..on },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub dim: usize,
    /// Blocks in each multimodal transformer and in the final fusion stack.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Layer-normalize every fused token before pooling.
    pub head_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 64,
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
            head_norm: true,
        }
    }
}

/// Single-head text-query attention with a residual from the queries.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new(init: &mut ParamInit, name: &str, dim: usize) -> Result<Self> {
        Ok(CrossAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, false, false)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, false, false)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, false, false)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub mt_vt: Vec<TransformerBlock>,
    pub mt_et: Vec<TransformerBlock>,
    pub sa_ve: TransformerBlock,
    pub ca_vt: CrossAttention,
    pub ca_et: CrossAttention,
    pub final_blocks: Vec<TransformerBlock>,
    pub head_norm: Option<LayerNorm>,
    pub classifier: Linear,
    /// Stand-in class tokens used when `sci` is off.
    pub free_tokens: ParamId,
}

impl FusionParams {
    pub fn new(init: &mut ParamInit, cfg: &FusionConfig, classes: usize) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "fusion: dim {} must be divisible by heads {}",
                cfg.dim, cfg.heads
            )));
        }
        let (d, h, r) = (cfg.dim, cfg.heads, cfg.mlp_ratio);
        Ok(FusionParams {
            mt_vt: TransformerBlock::stack(init, "fusion.mt_vt", cfg.depth, d, h, r, false)?,
            mt_et: TransformerBlock::stack(init, "fusion.mt_et", cfg.depth, d, h, r, false)?,
            sa_ve: TransformerBlock::new(init, "fusion.sa_ve", d, h, r, false)?,
            ca_vt: CrossAttention::new(init, "fusion.ca_vt", d)?,
            ca_et: CrossAttention::new(init, "fusion.ca_et", d)?,
            final_blocks: TransformerBlock::stack(init, "fusion.final", cfg.depth, d, h, r, false)?,
            head_norm: match cfg.head_norm {
                true => Some(LayerNorm::new(init, "fusion.head_norm", d, false)?),
                false => None,
            },
            classifier: Linear::new(init, "fusion.classifier", d, classes, true, false)?,
            free_tokens: init.normal("fusion.free_tokens", &[classes, d], false)?,
        })
    }
}

fn check_widths(s: &Session, op: &str, vars: &[Var]) -> Result<usize> {
    let w = s.graph.value(vars[0]).cols();
    for &v in &vars[1..] {
        let other = s.graph.value(v).cols();
        if other != w {
            return Err(Error::contract(format!("{op}: token widths {w} and {other} differ")));
        }
    }
    Ok(w)
}

/// Runs `blocks` over `[modality; text]` and splits the result back.
pub fn multimodal_transformer(
    s: &mut Session,
    modality: TokenSequence,
    text: TokenSequence,
    blocks: &[TransformerBlock],
) -> Result<(TokenSequence, TokenSequence)> {
    check_widths(s, "multimodal_transformer", &[modality.tokens, text.tokens])?;
    if blocks.is_empty() {
        return Ok((modality, text));
    }
    let n = s.graph.value(modality.tokens).rows();
    let joint = s.graph.concat_rows(&[modality.tokens, text.tokens])?;
    let joint = run_blocks(s, blocks, joint)?;
    let (m, t) = s.graph.split_rows(joint, n)?;
    Ok((
        TokenSequence {
            tokens: m,
            modality: modality.modality,
        },
        TokenSequence {
            tokens: t,
            modality: Modality::Text,
        },
    ))
}

pub fn fuse_vision_event(s: &mut Session, fv: TokenSequence, fe: TokenSequence, block: &TransformerBlock) -> Result<Var> {
    check_widths(s, "fuse_vision_event", &[fv.tokens, fe.tokens])?;
    let joint = s.graph.concat_rows(&[fv.tokens, fe.tokens])?;
    block.forward(s, joint)
}

/// `text + softmax(Q Kᵀ / √d) V` with Q from the text tokens and K, V from
/// the given key tokens. One output row per text row.
pub fn cross_attention(s: &mut Session, text: Var, keys: Var, ca: &CrossAttention) -> Result<Var> {
    check_widths(s, "cross_attention", &[text, keys])?;
    let q = ca.q.forward(s, text)?;
    let k = ca.k.forward(s, keys)?;
    let v = ca.v.forward(s, keys)?;
    let a = s.graph.scaled_dot_attention(q, k, v)?;
    s.graph.add(text, a)
}

pub struct HeadOutput {
    /// Length-`L` logits.
    pub logits: Var,
    /// `1 × dim` mean of the (with `head_norm`, normalized) fused tokens fed to
    /// the classifier.
    pub pooled: Var,
}

/// Concatenates the streams, runs the final fusion stack, optionally
/// normalizes each token, mean-pools and applies the classifier.
pub fn classify(s: &mut Session, streams: &[Var], params: &FusionParams) -> Result<HeadOutput> {
    if streams.is_empty() {
        return Err(Error::contract("classify needs at least one token stream"));
    }
    check_widths(s, "classify", streams)?;
    let joint = s.graph.concat_rows(streams)?;
    let joint = run_blocks(s, &params.final_blocks, joint)?;
    let joint = match &params.head_norm {
        Some(norm) => norm.forward(s, joint)?,
        None => joint,
    };
    let pooled = s.graph.mean_rows(joint)?;
    let row = params.classifier.forward(s, pooled)?;
    let classes = s.graph.value(row).cols();
    let logits = s.graph.reshape(row, &[classes])?;
    Ok(HeadOutput { logits, pooled })
}

/// Everything after the encoders. `fv`, `fe` are the frame-concatenated
/// vision and event tokens; `text` holds one token per class (ignored when
/// `sci` is off).
pub fn fuse_and_classify(
    s: &mut Session,
    fv: TokenSequence,
    fe: TokenSequence,
    text: Option<TokenSequence>,
    params: &FusionParams,
    switches: AblationSwitches,
) -> Result<HeadOutput> {
    let text = match (switches.sci, text) {
        (true, Some(t)) => t,
        (true, None) => return Err(Error::contract("text tokens are required when sci is on")),
        (false, _) => TokenSequence {
            tokens: s.param(params.free_tokens),
            modality: Modality::Text,
        },
    };
    let (fv2, tv, fe2, te) = if switches.mt {
        let (fv2, tv) = multimodal_transformer(s, fv, text, &params.mt_vt)?;
        let (fe2, te) = multimodal_transformer(s, fe, text, &params.mt_et)?;
        (fv2, tv, fe2, te)
    } else {
        (fv, text, fe, text)
    };
    let n_v = s.graph.value(fv2.tokens).rows();
    let fused = if switches.sa {
        fuse_vision_event(s, fv2, fe2, &params.sa_ve)?
    } else {
        s.graph.concat_rows(&[fv2.tokens, fe2.tokens])?
    };
    let (ca_vt, ca_et) = if switches.ca {
        let total = s.graph.value(fused).rows();
        let vis = s.graph.slice_rows(fused, 0, n_v)?;
        let ev = s.graph.slice_rows(fused, n_v, total - n_v)?;
        (
            cross_attention(s, tv.tokens, vis, &params.ca_vt)?,
            cross_attention(s, te.tokens, ev, &params.ca_et)?,
        )
    } else {
        (text.tokens, text.tokens)
    };
    classify(s, &[fused, ca_vt, ca_et], params)
}
