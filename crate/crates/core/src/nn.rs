//! Layers shared by the encoders and the generator. Each layer only holds
//! parameter ids; values live in a [`ParamStore`] and are read through a
//! [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, NodeId, Tensor};
use crate::params::{ParamId, ParamStore};

/// Transformer width and depth shared by every stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), d_in, d_out, scale, rng),
            b: Some(store.add_zeros(format!("{name}.b"), 1, d_out)),
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), d_in, d_out, scale, rng),
            b: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_full(format!("{name}.gamma"), 1, d, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), 1, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, d_hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        let d = dims.d_model;
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads: dims.heads,
        }
    }

    /// Queries from `x`, keys from `key_src`, values from `value_src`.
    pub fn forward_split(
        &self,
        g: &mut Graph,
        x: NodeId,
        key_src: NodeId,
        value_src: NodeId,
        mask: &Mask,
    ) -> NodeId {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, key_src);
        let v = self.v.forward(g, value_src);
        let a = g.attention(q, k, v, self.heads, mask);
        self.o.forward(g, a)
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId, mask: &Mask) -> NodeId {
        self.forward_split(g, x, memory, memory, mask)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dims.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dims.d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.d_model, dims.d_ff, dims.d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: &Mask) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Pre-norm block with self-attention, cross-attention and an MLP.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dims.d_model),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dims, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dims.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dims, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dims.d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.d_model, dims.d_ff, dims.d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId, self_mask: &Mask) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, self_mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, &Mask::None);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Adds a `rows x d` embedding table drawn from `±scale`.
pub fn embedding(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    d: usize,
    rng: &mut impl Rng,
) -> ParamId {
    store.add_uniform(name, rows, d, 0.1, rng)
}

/// Sinusoidal embedding of a scalar position into `d` (even) dims.
pub fn sinusoid(pos: f64, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 {
        let freq = 1.0 / 100f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
}

/// 2-D sinusoidal embeddings: the first half of each row encodes the grid
/// row, the second half the grid column.
pub fn grid_position_embedding(cells: &[(usize, usize)], d: usize) -> Tensor {
    assert!(d % 4 == 0, "2-D sinusoidal embedding needs d divisible by 4");
    let mut t = Tensor::zeros(cells.len(), d);
    for (i, &(r, c)) in cells.iter().enumerate() {
        let row = t.row_mut(i);
        let (a, b) = row.split_at_mut(d / 2);
        sinusoid(r as f64, d / 2, a);
        sinusoid(c as f64, d / 2, b);
    }
    t
}
