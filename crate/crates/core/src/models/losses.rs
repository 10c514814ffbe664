//! Per-utterance training objective of every method.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align_denoise::{align_denoise_loss, corrupt_alignment, NoiseSpec};
use crate::cif::{cif_na_loss, CifLossWeights};
use crate::ctc::{ctc_loss, viterbi_alignment, PosteriorGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::insertion::{insertion_loss, kermit_loss, slot_targets};
use crate::masked::{clamp_lengths, cmlm_loss, masked_nll, random_mask, span_mask, MaskCount};
use crate::nn::layers::positional_encoding;
use crate::nn::{Grads, Graph, Mat, Var};
use crate::regularized::combined_ctc_loss;

use super::config::TailHandling;
use super::decoders::framed;
use super::encoder::EncoderOutput;
use super::{Head, Method, Model};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Grads,
    /// Named loss terms before weighting.
    pub parts: Vec<(&'static str, f64)>,
}

pub(crate) fn grid_of(g: &Graph, v: Var) -> Result<PosteriorGrid> {
    PosteriorGrid::new(g.value(v).clone())
}

/// Number of tree-order rounds needed to build a sequence of `len` tokens.
pub fn tree_rounds(len: usize) -> usize {
    (usize::BITS - len.leading_zeros()) as usize
}

impl Model {
    /// Loss and parameter gradients for one utterance. `rng` drives every
    /// sampled quantity (dropout when `train`, masks, corruptions, depths).
    pub fn loss(
        &self,
        features: &Array2<f64>,
        target: &TokenSequence,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<LossOutput> {
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut g = if train {
            Graph::training(&self.store, self.config.model.dropout, dropout_rng)
        } else {
            Graph::new(&self.store)
        };
        let mut seeds: Vec<(Var, Mat)> = Vec::new();
        let mut parts = Vec::new();
        let loss = match self.method {
            Method::Kermit => self.kermit_objective(&mut g, features, target, rng, &mut seeds, &mut parts)?,
            _ => {
                let with_taps = !self.encoder.taps.is_empty();
                let out = self.encoder.forward(&mut g, features, with_taps)?;
                self.objective(&mut g, &out, target, rng, &mut seeds, &mut parts)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss {loss}", self.method)));
        }
        let grads = g.backward(&seeds);
        Ok(LossOutput { loss, grads, parts })
    }

    /// Encoder CTC, with the intermediate term when the encoder is tapped.
    fn encoder_ctc(
        &self,
        g: &Graph,
        out: &EncoderOutput,
        target: &TokenSequence,
        scale: f64,
        seeds: &mut Vec<(Var, Mat)>,
        parts: &mut Vec<(&'static str, f64)>,
    ) -> Result<f64> {
        let fin = grid_of(g, out.log_probs)?;
        let taps = out
            .tap_log_probs
            .iter()
            .map(|&v| grid_of(g, v))
            .collect::<Result<Vec<_>>>()?;
        let c = combined_ctc_loss(&fin, &taps, target, self.config.inter.weight)?;
        parts.push(("ctc", c.final_loss));
        if !taps.is_empty() {
            parts.push(("inter_ctc", c.inter_loss));
        }
        seeds.push((out.log_probs, c.final_grad * scale));
        for (&v, grad) in out.tap_log_probs.iter().zip(c.tap_grads) {
            seeds.push((v, grad * scale));
        }
        Ok(c.loss)
    }

    fn objective(
        &self,
        g: &mut Graph,
        out: &EncoderOutput,
        target: &TokenSequence,
        rng: &mut ChaCha8Rng,
        seeds: &mut Vec<(Var, Mat)>,
        parts: &mut Vec<(&'static str, f64)>,
    ) -> Result<f64> {
        let vocab = &self.vocab;
        match &self.head {
            Head::None => self.encoder_ctc(g, out, target, 1.0, seeds, parts),
            Head::Cmlm { decoder, length } => {
                let cw = self.config.mask_ctc.cmlm_weight;
                let ctc = self.encoder_ctc(g, out, target, 1.0 - cw, seeds, parts)?;
                if target.is_empty() {
                    return Ok((1.0 - cw) * ctc);
                }
                let pair = random_mask(target, vocab, MaskCount::Uniform, rng)?;
                let (_, lp) = decoder.log_probs(g, &pair.observed, out.hidden, false);
                let (cmlm, grad) = cmlm_loss(g.value(lp), &pair)?;
                parts.push(("cmlm", cmlm));
                seeds.push((lp, grad * cw));
                let mut total = cw * cmlm + (1.0 - cw) * ctc;
                if let Some(head) = length {
                    let ic = &self.config.improved;
                    let span = span_mask(target, vocab, ic.span_mean, rng)?;
                    let x = decoder.input.forward(g, &span.placeholders, 0);
                    let h = decoder.states(g, x, out.hidden, false);
                    let logits = head.forward(g, h);
                    let lp = g.log_softmax(logits);
                    let labels = clamp_lengths(&span.lengths, ic.length_classes);
                    let slots: Vec<(usize, usize)> = span
                        .placeholders
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t == vocab.mask())
                        .map(|(p, _)| p)
                        .zip(labels.0)
                        .collect();
                    let (len_loss, grad) = masked_nll(g.value(lp), &slots)?;
                    parts.push(("length", len_loss));
                    let w = cw * ic.length_weight;
                    seeds.push((lp, grad * w));
                    total += w * len_loss;
                }
                Ok(total)
            }
            Head::Denoiser(denoiser) => {
                let ac = &self.config.align_denoise;
                let enc = self.encoder_ctc(g, out, target, 1.0, seeds, parts)?;
                let clean = viterbi_alignment(&grid_of(g, out.log_probs)?, target)?;
                let spec = NoiseSpec {
                    sub_rate: ac.sub_rate,
                    del_rate: ac.del_rate,
                    ins_rate: ac.ins_rate,
                    seed: 0,
                };
                let noisy = corrupt_alignment(&clean, &spec, vocab, rng)?;
                let lp = denoiser.log_probs(g, out.hidden, &noisy.0);
                let dec = align_denoise_loss(&grid_of(g, lp)?, target)?;
                parts.push(("denoise_ctc", dec.loss));
                seeds.push((lp, dec.grad * ac.dec_weight));
                Ok(enc + ac.dec_weight * dec.loss)
            }
            Head::Insertion { decoder, slots } => {
                let depth = rng.random_range(0..=tree_rounds(target.len()));
                let (hyp, labels) = slot_targets(target, depth)?;
                let x = decoder.input.forward(g, &framed(&hyp, vocab), 0);
                let h = decoder.states(g, x, out.hidden, false);
                let lp = slots.forward(g, h);
                let (loss, grad) = insertion_loss(g.value(lp), &labels, vocab.size)?;
                parts.push(("insertion", loss));
                seeds.push((lp, grad));
                Ok(loss)
            }
            Head::Cif { alpha, decoder } => {
                let cc = &self.config.cif;
                let weights = CifLossWeights {
                    cif: cc.w_cif,
                    ctc: cc.w_ctc,
                    quantity: cc.w_qua,
                };
                let a = alpha.forward(g, out.hidden);
                let a = g.sigmoid(a);
                let alphas: Vec<f64> = g.value(a).column(0).to_vec();
                if target.is_empty() {
                    return Err(Error::invalid("integrate-and-fire training needs a non-empty target"));
                }
                let scaled = g.train_scale(a, target.len() as f64);
                let emb = g.cif(scaled, out.hidden, cc.threshold, cc.tail_handling == TailHandling::EmitPartial);
                if g.value(emb).nrows() != target.len() {
                    return Err(Error::shape(format!(
                        "rescaled weights fired {} times for {} tokens",
                        g.value(emb).nrows(),
                        target.len()
                    )));
                }
                let pos = g.input(positional_encoding(target.len(), self.config.model.d_model, 0));
                let x = g.add(emb, pos);
                let h = decoder.states(g, x, out.hidden, false);
                let lp = decoder.project(g, h);
                let l = cif_na_loss(g.value(lp), target, &grid_of(g, out.log_probs)?, &alphas, weights)?;
                parts.push(("cif", l.cif_loss));
                parts.push(("ctc", l.ctc_loss));
                parts.push(("quantity", l.quantity_loss));
                seeds.push((lp, l.decoder_grad));
                seeds.push((out.log_probs, l.grid_grad));
                seeds.push((a, ndarray::Array1::from(l.alpha_grad).insert_axis(Axis(1))));
                Ok(l.loss)
            }
            Head::Ar(decoder) => {
                let w = self.config.ar.ctc_weight;
                let ctc = ctc_loss(&grid_of(g, out.log_probs)?, target)?;
                parts.push(("ctc", ctc.loss));
                seeds.push((out.log_probs, ctc.grad * w));
                let mut input = vec![vocab.bos()];
                input.extend_from_slice(target);
                let (_, lp) = decoder.log_probs(g, &input, out.hidden, true);
                let pairs: Vec<(usize, usize)> = target
                    .iter()
                    .copied()
                    .chain(std::iter::once(vocab.size))
                    .enumerate()
                    .collect();
                let (ce, grad) = masked_nll(g.value(lp), &pairs)?;
                parts.push(("ce", ce));
                seeds.push((lp, grad * (1.0 - w)));
                Ok((1.0 - w) * ce + w * ctc.loss)
            }
            Head::Kermit { .. } => unreachable!("single-stack objective handled separately"),
        }
    }

    /// Runs the joint stack over frames followed by `[BOS, hyp.., EOS]`.
    /// Returns the conditioned CTC log-probabilities and slot log-probabilities.
    pub(crate) fn kermit_forward(&self, g: &mut Graph, features: &Array2<f64>, hyp: &[usize]) -> Result<(Var, Var)> {
        let Head::Kermit { tokens, segment, slots } = &self.head else {
            return Err(Error::invalid("not a single-stack insertion model"));
        };
        let frames = self.encoder.embed(g, features)?;
        let seg = segment.forward(g, &[0, 1]);
        let seg_frames = g.slice_rows(seg, 0, 1);
        let seg_tokens = g.slice_rows(seg, 1, 1);
        let frames = g.add_row(frames, seg_frames);
        let tok = tokens.forward(g, &framed(hyp, &self.vocab), 0);
        let tok = g.add_row(tok, seg_tokens);
        let mut x = g.concat_rows(&[frames, tok]);
        for block in &self.encoder.blocks {
            x = block.forward(g, x);
        }
        let t = features.nrows();
        let frame_part = g.slice_rows(x, 0, t);
        let (_, grid) = self.encoder.ctc_head(g, frame_part);
        let h = self.encoder.norm.forward(g, x);
        let token_part = g.slice_rows(h, t, hyp.len() + 2);
        let slot_lp = slots.forward(g, token_part);
        Ok((grid, slot_lp))
    }

    fn kermit_objective(
        &self,
        g: &mut Graph,
        features: &Array2<f64>,
        target: &TokenSequence,
        rng: &mut ChaCha8Rng,
        seeds: &mut Vec<(Var, Mat)>,
        parts: &mut Vec<(&'static str, f64)>,
    ) -> Result<f64> {
        let depth = rng.random_range(0..=tree_rounds(target.len()));
        let (hyp, labels) = slot_targets(target, depth)?;
        let (grid, slot_lp) = self.kermit_forward(g, features, &hyp)?;
        let l = kermit_loss(
            g.value(slot_lp),
            &labels,
            &grid_of(g, grid)?,
            target,
            self.config.kermit.lambda,
        )?;
        parts.push(("kermit", l.loss));
        seeds.push((slot_lp, l.slot_grad));
        if self.config.kermit.lambda != 0.0 {
            seeds.push((grid, l.grid_grad));
        }
        Ok(l.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::tree_rounds;

    #[test]
    fn tree_round_counts() {
        let expect = [0, 1, 2, 2, 3, 3, 3, 3, 4];
        for (len, &r) in expect.iter().enumerate() {
            assert_eq!(tree_rounds(len), r, "L={len}");
        }
    }
}
