//! Inference for every method, with iteration accounting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align_denoise::denoise_decode;
use crate::cif::cif_decode;
use crate::ctc::{argmax_lowest, best_path_decode, PosteriorGrid, TokenSequence};
use crate::error::Result;
use crate::insertion::{insertion_decode, kermit_decode};
use crate::masked::{improved_mask_ctc_decode, mask_ctc_decode};
use crate::nn::layers::positional_encoding;
use crate::nn::{Graph, Var};

use super::ar::ar_greedy_decode;
use super::decoders::framed;
use super::losses::grid_of;
use super::{Head, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Sequential decoding steps as counted for each method: 1 for
    /// single-pass methods, fill passes for mask refinement, model calls for
    /// insertion, emitted tokens plus the end step for greedy decoding.
    pub iterations: usize,
    /// Networks calls after the encoder, length prediction included.
    pub decoder_calls: usize,
    /// CTC head applications inside the encoder.
    pub head_evals: usize,
}

impl Model {
    pub fn decode(&self, features: &Array2<f64>) -> Result<DecodeResult> {
        if let Head::Kermit { .. } = self.head {
            return self.decode_kermit(features);
        }
        let mut g = Graph::new(&self.store);
        let out = self.encoder.forward(&mut g, features, false)?;
        let grid = grid_of(&g, out.log_probs)?;
        let hidden = g.value(out.hidden).clone();
        let vocab = &self.vocab;
        let single = |tokens: TokenSequence, calls| DecodeResult {
            tokens: tokens.0,
            iterations: 1,
            decoder_calls: calls,
            head_evals: out.head_evals,
        };
        // Each decoder call gets a fresh graph seeded with the encoder states.
        let with_memory = |g: &mut Graph| -> Var { g.input(hidden.clone()) };
        Ok(match &self.head {
            Head::None => single(best_path_decode(&grid).tokens, 0),
            Head::Cmlm { decoder, length } => {
                let mc = &self.config.mask_ctc;
                let mut predictor = |obs: &[usize]| -> Result<Array2<f64>> {
                    let mut g = Graph::new(&self.store);
                    let mem = with_memory(&mut g);
                    let (_, lp) = decoder.log_probs(&mut g, obs, mem, false);
                    Ok(g.value(lp).clone())
                };
                let outcome = match length {
                    None => mask_ctc_decode(&grid, &mut predictor, mc.p_thr, mc.iterations, vocab)?,
                    Some(head) => {
                        let mut lengths = |obs: &[usize]| -> Result<Vec<usize>> {
                            let mut g = Graph::new(&self.store);
                            let mem = with_memory(&mut g);
                            let x = decoder.input.forward(&mut g, obs, 0);
                            let h = decoder.states(&mut g, x, mem, false);
                            let logits = head.forward(&mut g, h);
                            let lv = g.value(logits);
                            Ok(obs
                                .iter()
                                .enumerate()
                                .filter(|(_, &t)| t == vocab.mask())
                                .map(|(p, _)| argmax_lowest(lv.row(p)).0)
                                .collect())
                        };
                        improved_mask_ctc_decode(
                            &grid,
                            &mut lengths,
                            &mut predictor,
                            mc.p_thr,
                            self.config.improved.iterations,
                            vocab,
                        )?
                    }
                };
                DecodeResult {
                    tokens: outcome.tokens.0,
                    iterations: outcome.iterations,
                    decoder_calls: outcome.iterations + outcome.length_passes,
                    head_evals: out.head_evals,
                }
            }
            Head::Denoiser(denoiser) => {
                let outcome = denoise_decode(&grid, vocab, |alignment| {
                    let mut g = Graph::new(&self.store);
                    let mem = with_memory(&mut g);
                    let lp = denoiser.log_probs(&mut g, mem, &alignment.0);
                    grid_of(&g, lp)
                })?;
                single(outcome.tokens, outcome.decoder_calls)
            }
            Head::Insertion { decoder, slots } => {
                let mut model = |hyp: &[usize]| -> Result<Array2<f64>> {
                    let mut g = Graph::new(&self.store);
                    let mem = with_memory(&mut g);
                    let x = decoder.input.forward(&mut g, &framed(hyp, vocab), 0);
                    let h = decoder.states(&mut g, x, mem, false);
                    let lp = slots.forward(&mut g, h);
                    Ok(g.value(lp).clone())
                };
                let outcome = insertion_decode(&mut model, self.config.insertion.max_rounds, features.nrows())?;
                DecodeResult {
                    tokens: outcome.tokens.0,
                    iterations: outcome.rounds,
                    decoder_calls: outcome.rounds,
                    head_evals: out.head_evals,
                }
            }
            Head::Cif { alpha, decoder } => {
                let cc = &self.config.cif;
                let a = alpha.forward(&mut g, out.hidden);
                let a = g.sigmoid(a);
                let alphas = g.value(a).column(0).to_vec();
                let outcome = cif_decode(&alphas, hidden.view(), cc.threshold, cc.tail_handling, |emb| {
                    let mut g = Graph::new(&self.store);
                    let mem = with_memory(&mut g);
                    let x = g.input(emb + &positional_encoding(emb.nrows(), self.config.model.d_model, 0));
                    let h = decoder.states(&mut g, x, mem, false);
                    let lp = decoder.project(&mut g, h);
                    Ok(g.value(lp).clone())
                })?;
                single(outcome.tokens, outcome.decoder_calls)
            }
            Head::Ar(decoder) => {
                let max_len = self.config.ar.max_len.unwrap_or(features.nrows());
                let outcome = ar_greedy_decode(
                    |prefix| {
                        let mut g = Graph::new(&self.store);
                        let mem = with_memory(&mut g);
                        let mut ids = Vec::with_capacity(prefix.len() + 1);
                        ids.push(vocab.bos());
                        ids.extend_from_slice(prefix);
                        let (_, lp) = decoder.log_probs(&mut g, &ids, mem, true);
                        Ok(g.value(lp).row(prefix.len()).to_owned())
                    },
                    max_len,
                    vocab.size,
                )?;
                DecodeResult {
                    tokens: outcome.tokens.0,
                    iterations: outcome.iterations,
                    decoder_calls: outcome.iterations,
                    head_evals: out.head_evals,
                }
            }
            Head::Kermit { .. } => unreachable!("handled above"),
        })
    }

    fn decode_kermit(&self, features: &Array2<f64>) -> Result<DecodeResult> {
        let mut model = |hyp: &[usize]| -> Result<(Array2<f64>, PosteriorGrid)> {
            let mut g = Graph::new(&self.store);
            let (grid, slots) = self.kermit_forward(&mut g, features, hyp)?;
            Ok((g.value(slots).clone(), grid_of(&g, grid)?))
        };
        let outcome = kermit_decode(
            &mut model,
            self.config.kermit.rounds_budget,
            self.config.insertion.max_rounds,
            features.nrows(),
        )?;
        Ok(DecodeResult {
            tokens: outcome.tokens.0,
            iterations: outcome.calls,
            decoder_calls: outcome.calls,
            head_evals: outcome.calls,
        })
    }

    /// Encoder CTC posteriors (the conditioned grid with an empty hypothesis
    /// for the single-stack model).
    pub fn ctc_grid(&self, features: &Array2<f64>) -> Result<PosteriorGrid> {
        let mut g = Graph::new(&self.store);
        if let Head::Kermit { .. } = self.head {
            let (grid, _) = self.kermit_forward(&mut g, features, &[])?;
            return grid_of(&g, grid);
        }
        let out = self.encoder.forward(&mut g, features, false)?;
        grid_of(&g, out.log_probs)
    }
}
