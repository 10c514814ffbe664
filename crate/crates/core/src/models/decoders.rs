//! Decoder networks attached to the frame encoder.

use crate::ctc::Vocab;
use crate::nn::layers::{positional_encoding, DecoderBlock, EncoderBlock, Embedding, LayerNorm, Linear};
use crate::nn::{Graph, ParamStore, Var};

use super::config::ModelConfig;

/// Embeds token ids (all reserved ids included) with sinusoidal positions.
#[derive(Debug, Clone)]
pub struct TokenInput {
    pub embed: Embedding,
    pub d_model: usize,
}

impl TokenInput {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, d_model: usize) -> Self {
        TokenInput {
            embed: Embedding::new(store, &format!("{prefix}.embed"), vocab.eos() + 1, d_model),
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize], offset: usize) -> Var {
        let e = self.embed.forward(g, ids);
        let e = g.scale(e, (self.d_model as f64).sqrt());
        let pos = g.input(positional_encoding(ids.len(), self.d_model, offset));
        let x = g.add(e, pos);
        g.dropout(x)
    }
}

/// Stack of decoder blocks with cross-attention to encoder states, a final
/// layer norm and an output projection.
#[derive(Debug, Clone)]
pub struct TokenDecoder {
    pub input: TokenInput,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    /// Absent when another head reads the states.
    pub out: Option<Linear>,
}

impl TokenDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, config: &ModelConfig, outputs: usize) -> Self {
        let d = config.d_model;
        TokenDecoder {
            input: TokenInput::new(store, prefix, vocab, d),
            blocks: (0..config.dec_layers)
                .map(|i| DecoderBlock::new(store, &format!("{prefix}.block{i}"), d, config.d_ff, config.heads))
                .collect(),
            norm: LayerNorm::new(store, &format!("{prefix}.ln_out"), d),
            out: (outputs > 0).then(|| Linear::new(store, &format!("{prefix}.out"), d, outputs)),
        }
    }

    /// Normalized decoder states for already-embedded inputs.
    pub fn states(&self, g: &mut Graph, mut x: Var, memory: Var, causal: bool) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x, memory, causal);
        }
        self.norm.forward(g, x)
    }

    /// Output log-probabilities of the projection for normalized states.
    pub fn project(&self, g: &mut Graph, h: Var) -> Var {
        let out = self.out.as_ref().expect("decoder built with an output projection");
        let logits = out.forward(g, h);
        g.log_softmax(logits)
    }

    /// States and output log-probabilities for token ids.
    pub fn log_probs(&self, g: &mut Graph, ids: &[usize], memory: Var, causal: bool) -> (Var, Var) {
        let x = self.input.forward(g, ids, 0);
        let h = self.states(g, x, memory, causal);
        (h, self.project(g, h))
    }
}

/// Denoiser over frames: encoder states plus an embedding of a (noisy)
/// alignment, self-attention blocks and its own CTC head.
#[derive(Debug, Clone)]
pub struct FrameDecoder {
    pub align_embed: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl FrameDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, config: &ModelConfig) -> Self {
        let d = config.d_model;
        FrameDecoder {
            align_embed: Embedding::new(store, &format!("{prefix}.align_embed"), vocab.ctc_classes(), d),
            blocks: (0..config.dec_layers)
                .map(|i| EncoderBlock::new(store, &format!("{prefix}.block{i}"), d, config.d_ff, config.heads))
                .collect(),
            norm: LayerNorm::new(store, &format!("{prefix}.ln_out"), d),
            head: Linear::new(store, &format!("{prefix}.head"), d, vocab.ctc_classes()),
        }
    }

    pub fn log_probs(&self, g: &mut Graph, states: Var, alignment: &[usize]) -> Var {
        let a = self.align_embed.forward(g, alignment);
        let mut x = g.add(states, a);
        for block in &self.blocks {
            x = block.forward(g, x);
        }
        let h = self.norm.forward(g, x);
        let logits = self.head.forward(g, h);
        g.log_softmax(logits)
    }
}

/// Slot head: each slot sees the states on both sides of its gap.
#[derive(Debug, Clone)]
pub struct SlotHead {
    pub out: Linear,
}

impl SlotHead {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: &Vocab, d_model: usize) -> Self {
        SlotHead {
            out: Linear::new(store, &format!("{prefix}.slot_head"), 2 * d_model, vocab.size + 1),
        }
    }

    /// `states` holds `[BOS, hyp.., EOS]`; returns `(len+1) x (V+1)`
    /// log-probabilities.
    pub fn forward(&self, g: &mut Graph, states: Var) -> Var {
        let n = g.value(states).nrows();
        let left = g.slice_rows(states, 0, n - 1);
        let right = g.slice_rows(states, 1, n - 1);
        let pair = g.concat_cols(&[left, right]);
        let logits = self.out.forward(g, pair);
        g.log_softmax(logits)
    }
}

/// `[BOS, tokens.., EOS]`
pub fn framed(tokens: &[usize], vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(vocab.bos());
    ids.extend_from_slice(tokens);
    ids.push(vocab.eos());
    ids
}
