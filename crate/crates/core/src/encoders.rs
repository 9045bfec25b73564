//! Patch embedding and transformer encoders for RGB and event frames.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{run_blocks, Linear, Session, TransformerBlock};
use crate::params::{ParamId, ParamInit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Event,
    Text,
}

/// Token matrix (`n_tokens × dim`) living in a session's graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Deep blocks are excluded from optimizer updates.
    pub frozen: bool,
    /// Depth of the trainable stand-in used when the large-encoder switch is off.
    pub shallow_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            frozen: true,
            shallow_depth: 1,
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16 geometry.
    pub fn full_scale() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            frozen: true,
            shallow_depth: 1,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "{name}: image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{name}: dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config(format!("{name}: mlp_ratio must be positive")));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn tokens_per_frame(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub shallow_blocks: Vec<TransformerBlock>,
}

impl EncoderParams {
    /// The patch embedding is always trainable; `cfg.frozen` applies to the
    /// deep block stack only.
    pub fn new(init: &mut ParamInit, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate(name)?;
        let embed = PatchEmbed {
            proj: Linear::new(init, &format!("{name}.patch.proj"), cfg.patch_dim(), cfg.dim, true, false)?,
            class_token: init.normal(&format!("{name}.patch.class_token"), &[1, cfg.dim], false)?,
            positions: init.normal(&format!("{name}.patch.positions"), &[cfg.tokens_per_frame(), cfg.dim], false)?,
        };
        let blocks = TransformerBlock::stack(
            init,
            &format!("{name}.blocks"),
            cfg.depth,
            cfg.dim,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.frozen,
        )?;
        let shallow_blocks = TransformerBlock::stack(
            init,
            &format!("{name}.shallow"),
            cfg.shallow_depth,
            cfg.dim,
            cfg.heads,
            cfg.mlp_ratio,
            false,
        )?;
        Ok(EncoderParams {
            embed,
            blocks,
            shallow_blocks,
        })
    }
}

/// Resizes a 3-channel frame to `image_size` and flattens non-overlapping
/// patches row-major; each row is `(py, px, channel)` ordered.
pub fn patch_matrix(frame: &Image, cfg: &EncoderConfig) -> Result<Tensor> {
    if frame.channels() != 3 {
        return Err(Error::contract(format!(
            "patch embedding expects 3 channels, got {}",
            frame.channels()
        )));
    }
    if frame.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("patch embedding input"));
    }
    let img = frame.resize_bilinear(cfg.image_size, cfg.image_size);
    let (p, side) = (cfg.patch_size, cfg.patches_per_side());
    let mut data = Vec::with_capacity(side * side * cfg.patch_dim());
    for gy in 0..side {
        for gx in 0..side {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        data.push(img.at(gx * p + px, gy * p + py, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![side * side, cfg.patch_dim()], data)
}

/// Projects a precomputed patch matrix and adds class token and positions.
pub fn embed_patches(s: &mut Session, patches: &Tensor, embed: &PatchEmbed, modality: Modality) -> Result<TokenSequence> {
    let x = s.graph.constant(patches.clone());
    let projected = embed.proj.forward(s, x)?;
    let cls = s.param(embed.class_token);
    let joined = s.graph.concat_rows(&[cls, projected])?;
    let pos = s.param(embed.positions);
    let tokens = s.graph.add(joined, pos)?;
    Ok(TokenSequence { tokens, modality })
}

pub fn patchify_embed(
    s: &mut Session,
    frame: &Image,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    modality: Modality,
) -> Result<TokenSequence> {
    let patches = patch_matrix(frame, cfg)?;
    embed_patches(s, &patches, &params.embed, modality)
}

/// Runs the block stack (deep, or the shallow stand-in when `large` is
/// false).
pub fn encoder_forward(
    s: &mut Session,
    tokens: TokenSequence,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    large: bool,
) -> Result<TokenSequence> {
    let width = s.graph.value(tokens.tokens).cols();
    if width != cfg.dim {
        return Err(Error::contract(format!(
            "encoder expects token width {}, got {width}",
            cfg.dim
        )));
    }
    let blocks = if large { &params.blocks } else { &params.shallow_blocks };
    Ok(TokenSequence {
        tokens: run_blocks(s, blocks, tokens.tokens)?,
        modality: tokens.modality,
    })
}

/// Encodes each frame independently.
pub fn encode_clip(
    s: &mut Session,
    patches: &[Tensor],
    cfg: &EncoderConfig,
    params: &EncoderParams,
    modality: Modality,
    large: bool,
) -> Result<Vec<TokenSequence>> {
    if patches.is_empty() {
        return Err(Error::contract("cannot encode an empty clip"));
    }
    patches
        .iter()
        .map(|p| {
            let t = embed_patches(s, p, &params.embed, modality)?;
            encoder_forward(s, t, cfg, params, large)
        })
        .collect()
}

/// Patch matrices for a list of 3-channel frames.
pub fn clip_patches(frames: &[Image], cfg: &EncoderConfig) -> Result<Vec<Tensor>> {
    frames.iter().map(|f| patch_matrix(f, cfg)).collect()
}
