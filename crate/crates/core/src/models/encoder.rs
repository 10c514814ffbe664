//! Frame encoder with a CTC head, optional intermediate taps and optional
//! posterior feedback at those taps.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::layers::{positional_encoding, EncoderBlock, LayerNorm, Linear};
use crate::nn::{Graph, ParamStore, Var};

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    /// 1-based block indices after which the CTC head is applied.
    pub taps: Vec<usize>,
    /// Projection of tap posteriors back to the model width. Present only for
    /// self-conditioned encoders.
    pub feedback: Option<Vec<Linear>>,
    pub feat_dim: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final normalized hidden states, `T x d_model`.
    pub hidden: Var,
    /// Final CTC log-probabilities, `T x (V+1)`.
    pub log_probs: Var,
    /// Log-probabilities at each tap, in tap order. Empty unless taps were
    /// requested or feedback is active.
    pub tap_log_probs: Vec<Var>,
    /// How many times the CTC head was applied.
    pub head_evals: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feat_dim: usize,
        classes: usize,
        config: &ModelConfig,
        taps: Vec<usize>,
        self_conditioned: bool,
    ) -> Result<Self> {
        for &t in &taps {
            if t == 0 || t >= config.enc_layers {
                return Err(Error::invalid(format!(
                    "tap layer {t} must lie in 1..{}",
                    config.enc_layers
                )));
            }
        }
        if self_conditioned && taps.is_empty() {
            return Err(Error::invalid("self-conditioning needs at least one tap"));
        }
        let d = config.d_model;
        let input = Linear::new(store, &format!("{prefix}.input"), feat_dim, d);
        let blocks = (0..config.enc_layers)
            .map(|i| EncoderBlock::new(store, &format!("{prefix}.block{i}"), d, config.d_ff, config.heads))
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}.ln_out"), d);
        let head = Linear::new(store, &format!("{prefix}.ctc_head"), d, classes);
        let feedback = self_conditioned.then(|| {
            taps.iter()
                .map(|t| Linear::new(store, &format!("{prefix}.feedback{t}"), classes, d))
                .collect()
        });
        Ok(Encoder {
            input,
            blocks,
            norm,
            head,
            taps,
            feedback,
            feat_dim,
            d_model: d,
        })
    }

    /// Projects features and adds positions; the entry to the block stack.
    pub fn embed(&self, g: &mut Graph, features: &Array2<f64>) -> Result<Var> {
        if features.ncols() != self.feat_dim {
            return Err(Error::shape(format!(
                "features have {} columns, encoder expects {}",
                features.ncols(),
                self.feat_dim
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::shape("empty feature matrix"));
        }
        let x = g.input(features.clone());
        let x = self.input.forward(g, x);
        let pos = g.input(positional_encoding(features.nrows(), self.d_model, 0));
        let x = g.add(x, pos);
        Ok(g.dropout(x))
    }

    /// Log-probabilities of the shared CTC head on un-normalized states.
    pub fn ctc_head(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.norm.forward(g, x);
        let logits = self.head.forward(g, h);
        (h, g.log_softmax(logits))
    }

    /// Full forward pass. `with_taps` evaluates the tap heads even when no
    /// feedback needs them (training of intermediate CTC).
    pub fn forward(&self, g: &mut Graph, features: &Array2<f64>, with_taps: bool) -> Result<EncoderOutput> {
        let x = self.embed(g, features)?;
        self.forward_from(g, x, with_taps)
    }

    /// Runs the block stack on already-embedded inputs.
    pub fn forward_from(&self, g: &mut Graph, mut x: Var, with_taps: bool) -> Result<EncoderOutput> {
        let mut tap_log_probs = Vec::new();
        let mut head_evals = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x);
            let layer = i + 1;
            let Some(tap_idx) = self.taps.iter().position(|&t| t == layer) else {
                continue;
            };
            if !with_taps && self.feedback.is_none() {
                continue;
            }
            let h = self.norm.forward(g, x);
            let logits = self.head.forward(g, h);
            head_evals += 1;
            tap_log_probs.push(g.log_softmax(logits));
            if let Some(feedback) = &self.feedback {
                let posteriors = g.softmax(logits);
                let back = feedback[tap_idx].forward(g, posteriors);
                x = g.add(x, back);
            }
        }
        let (hidden, log_probs) = self.ctc_head(g, x);
        head_evals += 1;
        Ok(EncoderOutput {
            hidden,
            log_probs,
            tap_log_probs,
            head_evals,
        })
    }
}
