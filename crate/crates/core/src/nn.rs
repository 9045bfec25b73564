//! Shared layers: linear maps, layer norm, multi-head attention and the
//! pre-norm transformer block used by every encoder and fusion stage.

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamInit, ParamStore};

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    pub binder: Binder<'a>,
    pub activation: Activation,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, activation: Activation) -> Self {
        Session {
            graph: Graph::new(),
            binder: Binder::new(store),
            activation,
        }
    }

    /// Session whose graph differentiates every parameter, frozen or not.
    pub fn tracking_all(store: &'a ParamStore, activation: Activation) -> Self {
        Session {
            graph: Graph::new(),
            binder: Binder::tracking_all(store),
            activation,
        }
    }

    pub fn with_graph(graph: Graph, binder: Binder<'a>, activation: Activation) -> Self {
        Session {
            graph,
            binder,
            activation,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binder.get(&mut self.graph, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut ParamInit, name: &str, d_in: usize, d_out: usize, bias: bool, frozen: bool) -> Result<Self> {
        let weight = init.normal(&format!("{name}.weight"), &[d_in, d_out], frozen)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[1, d_out], frozen)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, name: &str, dim: usize, frozen: bool) -> Result<Self> {
        Ok(LayerNorm {
            gain: init.ones(&format!("{name}.gain"), &[dim], frozen)?,
            bias: init.zeros(&format!("{name}.bias"), &[dim], frozen)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.graph.layer_norm(x, g, b)
    }
}

/// Splits `q`, `k`, `v` column-wise into `heads` groups, attends per head,
/// and concatenates the results.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let dim = g.value(q).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::contract(format!("width {dim} is not divisible by {heads} heads")));
    }
    if heads == 1 {
        return g.scaled_dot_attention(q, k, v);
    }
    let dh = dim / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(g.scaled_dot_attention(qh, kh, vh)?);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = dim * mlp_ratio.max(1);
        Ok(TransformerBlock {
            ln_attn: LayerNorm::new(init, &format!("{name}.ln_attn"), dim, frozen)?,
            attn: SelfAttention {
                q: Linear::new(init, &format!("{name}.attn.q"), dim, dim, true, frozen)?,
                k: Linear::new(init, &format!("{name}.attn.k"), dim, dim, true, frozen)?,
                v: Linear::new(init, &format!("{name}.attn.v"), dim, dim, true, frozen)?,
                out: Linear::new(init, &format!("{name}.attn.out"), dim, dim, true, frozen)?,
            },
            ln_mlp: LayerNorm::new(init, &format!("{name}.ln_mlp"), dim, frozen)?,
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), dim, hidden, true, frozen)?,
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), hidden, dim, true, frozen)?,
            heads,
        })
    }

    pub fn stack(
        init: &mut ParamInit,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
    ) -> Result<Vec<Self>> {
        (0..depth)
            .map(|i| TransformerBlock::new(init, &format!("{name}.{i}"), dim, heads, mlp_ratio, frozen))
            .collect()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let q = self.attn.q.forward(s, h)?;
        let k = self.attn.k.forward(s, h)?;
        let v = self.attn.v.forward(s, h)?;
        let a = multi_head_attention(&mut s.graph, q, k, v, self.heads)?;
        let a = self.attn.out.forward(s, a)?;
        let x = s.graph.add(x, a)?;

        let h = self.ln_mlp.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.graph.activation(h, s.activation);
        let h = self.fc2.forward(s, h)?;
        s.graph.add(x, h)
    }
}

/// Runs blocks in order; an empty stack returns `x` itself.
pub fn run_blocks(s: &mut Session, blocks: &[TransformerBlock], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(s, x)?;
    }
    Ok(x)
}
