//! Transformer building blocks expressed as parameter handles plus forward
//! functions over a [`Graph`].

use ndarray::Array2;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), input, output, Init::Xavier),
            b: Some(store.add(&format!("{name}.b"), 1, output, Init::Zeros)),
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), input, output, Init::Xavier),
            b: None,
        }
    }

    /// A linear map whose weights start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), input, output, Init::Zeros),
            b: Some(store.add(&format!("{name}.b"), 1, output, Init::Zeros)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
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
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize) -> Self {
        Embedding {
            table: store.add(&format!("{name}.table"), count, dim, Init::Normal(1.0 / (dim as f64).sqrt())),
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "model width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim),
            // A key bias shifts every score of a query equally; softmax ignores it.
            key: Linear::without_bias(store, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let a = g.attention(q, k, v, self.heads, causal);
        self.out.forward(g, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        let h = g.dropout(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff: usize, heads: usize) -> Self {
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm_attn.forward(g, x);
        let h = self.attn.forward(g, h, h, false);
        let h = g.dropout(h);
        let x = g.add(x, h);
        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        let h = g.dropout(h);
        g.add(x, h)
    }
}

/// Pre-norm block with self-attention, cross-attention to an encoder
/// memory, and a feed-forward layer.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff: usize, heads: usize) -> Self {
        DecoderBlock {
            norm_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads),
            norm_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Var {
        let h = self.norm_self.forward(g, x);
        let h = self.self_attn.forward(g, h, h, causal);
        let h = g.dropout(h);
        let x = g.add(x, h);
        let h = self.norm_cross.forward(g, x);
        let h = self.cross_attn.forward(g, h, memory, false);
        let h = g.dropout(h);
        let x = g.add(x, h);
        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        let h = g.dropout(h);
        g.add(x, h)
    }
}

/// Sinusoidal position table for `len` positions starting at `offset`.
pub fn positional_encoding(len: usize, dim: usize, offset: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pos = (pos + offset) as f64;
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}
