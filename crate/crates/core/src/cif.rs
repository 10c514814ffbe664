//! Integrate-and-fire over encoder frames, the quantity loss and the
//! parallel decoder objective built on them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::ctc::{argmax_lowest, ctc_loss, PosteriorGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::masked::masked_nll;
use crate::models::config::TailHandling;
pub use crate::nn::graph::cif_weights;

/// Integrated embeddings plus the weight each frame contributed to each.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticEmbeddings {
    /// `L' x d`
    pub embeddings: Array2<f64>,
    /// `L' x T`
    pub weights: Array2<f64>,
}

impl AcousticEmbeddings {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::invalid(format!("frame weight {a} must be finite and non-negative")));
    }
    Ok(())
}

pub fn cif_integrate(
    alphas: &[f64],
    states: ArrayView2<f64>,
    threshold: f64,
    tail: TailHandling,
) -> Result<AcousticEmbeddings> {
    check_alphas(alphas)?;
    if threshold <= 0.0 {
        return Err(Error::invalid("firing threshold must be positive"));
    }
    if states.nrows() != alphas.len() {
        return Err(Error::shape(format!(
            "{} weights for {} frames",
            alphas.len(),
            states.nrows()
        )));
    }
    let (weights, _) = cif_weights(alphas, threshold, tail == TailHandling::EmitPartial);
    Ok(AcousticEmbeddings {
        embeddings: weights.dot(&states),
        weights,
    })
}

/// `|sum(alphas) - L|` and its gradient (zero exactly at the kink).
pub fn quantity_loss(alphas: &[f64], target_len: usize) -> (f64, Vec<f64>) {
    let diff = alphas.iter().sum::<f64>() - target_len as f64;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs(), vec![sign; alphas.len()])
}

/// Rescales the weights to sum to `target_len`.
pub fn train_scale(alphas: &[f64], target_len: usize) -> Result<Vec<f64>> {
    check_alphas(alphas)?;
    let total: f64 = alphas.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("cannot rescale weights that sum to zero"));
    }
    let f = target_len as f64 / total;
    Ok(alphas.iter().map(|a| a * f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CifLossWeights {
    pub cif: f64,
    pub ctc: f64,
    pub quantity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CifNaLoss {
    pub loss: f64,
    pub cif_loss: f64,
    pub ctc_loss: f64,
    pub quantity_loss: f64,
    /// Gradient w.r.t. the decoder log-probabilities, `L x V`.
    pub decoder_grad: Array2<f64>,
    /// Gradient w.r.t. the encoder CTC log-probabilities.
    pub grid_grad: Array2<f64>,
    /// Gradient of the quantity term w.r.t. the unscaled weights.
    pub alpha_grad: Vec<f64>,
}

/// Weighted sum of per-position cross-entropy, encoder CTC and quantity loss.
pub fn cif_na_loss(
    decoder_log_probs: &Array2<f64>,
    target: &TokenSequence,
    grid: &PosteriorGrid,
    alphas: &[f64],
    weights: CifLossWeights,
) -> Result<CifNaLoss> {
    if decoder_log_probs.nrows() != target.len() {
        return Err(Error::shape(format!(
            "{} decoder positions for a target of {}",
            decoder_log_probs.nrows(),
            target.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = target.iter().copied().enumerate().collect();
    let (ce, ce_grad) = masked_nll(decoder_log_probs, &pairs)?;
    let (ctc, grid_grad) = if weights.ctc != 0.0 {
        let l = ctc_loss(grid, target)?;
        (l.loss, l.grad * weights.ctc)
    } else {
        (0.0, Array2::zeros(grid.log_probs().raw_dim()))
    };
    let (qua, qua_grad) = quantity_loss(alphas, target.len());
    Ok(CifNaLoss {
        loss: weights.cif * ce + weights.ctc * ctc + weights.quantity * qua,
        cif_loss: ce,
        ctc_loss: ctc,
        quantity_loss: qua,
        decoder_grad: ce_grad * weights.cif,
        grid_grad,
        alpha_grad: qua_grad.into_iter().map(|g| g * weights.quantity).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CifOutcome {
    pub tokens: TokenSequence,
    pub decoder_calls: usize,
}

/// Unscaled integration fixes the output length; one parallel decoder pass
/// over the embeddings picks each token.
pub fn cif_decode<F>(
    alphas: &[f64],
    states: ArrayView2<f64>,
    threshold: f64,
    tail: TailHandling,
    decoder: F,
) -> Result<CifOutcome>
where
    F: FnOnce(&Array2<f64>) -> Result<Array2<f64>>,
{
    let c = cif_integrate(alphas, states, threshold, tail)?;
    if c.is_empty() {
        return Ok(CifOutcome {
            tokens: TokenSequence(Vec::new()),
            decoder_calls: 0,
        });
    }
    let log_probs = decoder(&c.embeddings)?;
    if log_probs.nrows() != c.len() {
        return Err(Error::shape("decoder output length differs from firing count"));
    }
    let tokens = log_probs.rows().into_iter().map(|r| argmax_lowest(r).0).collect();
    Ok(CifOutcome {
        tokens: TokenSequence(tokens),
        decoder_calls: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quantity_examples() {
        assert_eq!(quantity_loss(&[0.5, 0.5, 1.0], 2).0, 0.0);
        let (l, g) = quantity_loss(&[0.3, 0.4], 2);
        assert!((l - 1.3).abs() < 1e-15);
        assert_eq!(g, vec![-1.0, -1.0]);
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(train_scale(&[0.5, 0.5], 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(train_scale(&[0.25, 0.75], 1).unwrap(), vec![0.25, 0.75]);
        assert!(train_scale(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn integrate_examples() {
        let h = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let c = cif_integrate(&[0.6, 0.6, 0.8], h.view(), 1.0, TailHandling::Discard).unwrap();
        let expect = array![[0.6, 0.4], [1.6, 1.8]];
        assert!((&c.embeddings - &expect).iter().all(|d| d.abs() < 1e-12));
        assert!(cif_integrate(&[-0.1, 0.5, 0.5], h.view(), 1.0, TailHandling::Discard).is_err());
    }

    #[test]
    fn perfect_decoder_has_zero_cross_entropy() {
        let y = TokenSequence(vec![1, 0]);
        let dec = array![[-50.0, 0.0], [0.0, -50.0]];
        let grid = PosteriorGrid::from_logits(&array![[0.0, 3.0, 0.0], [3.0, 0.0, 0.0]]);
        let w = CifLossWeights {
            cif: 1.0,
            ctc: 0.0,
            quantity: 0.0,
        };
        let l = cif_na_loss(&dec, &y, &grid, &[1.0, 1.0], w).unwrap();
        assert_eq!(l.cif_loss, 0.0);
        assert_eq!(l.loss, 0.0);
    }
}
