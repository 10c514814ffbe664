//! Auxiliary CTC losses on intermediate encoder layers.
//!
//! The encoder side (tapping, posterior feedback) lives in
//! [`crate::models::encoder`]; this module combines the per-grid losses.

use ndarray::Array2;

use crate::ctc::{ctc_loss, PosteriorGrid, TokenSequence};
use crate::error::{Error, Result};

/// Posterior rows of one tap, `T x (V+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediatePosteriors(Array2<f64>);

impl IntermediatePosteriors {
    pub fn from_grid(grid: &PosteriorGrid) -> Self {
        IntermediatePosteriors(grid.log_probs().mapv(f64::exp))
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.0
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Mean CTC loss over the tap grids and the gradient for each.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateLoss {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
}

pub fn intermediate_ctc_loss(taps: &[PosteriorGrid], target: &TokenSequence) -> Result<IntermediateLoss> {
    if taps.is_empty() {
        return Ok(IntermediateLoss {
            loss: 0.0,
            grads: Vec::new(),
        });
    }
    let n = taps.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(taps.len());
    for grid in taps {
        let l = ctc_loss(grid, target)?;
        loss += l.loss / n;
        grads.push(l.grad / n);
    }
    Ok(IntermediateLoss { loss, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedCtcLoss {
    /// `(1 - w) * final + w * mean(taps)`; plain final CTC when there are
    /// no taps.
    pub loss: f64,
    pub final_loss: f64,
    pub inter_loss: f64,
    pub final_grad: Array2<f64>,
    pub tap_grads: Vec<Array2<f64>>,
}

/// Objective of intermediate and self-conditioned CTC.
pub fn combined_ctc_loss(
    final_grid: &PosteriorGrid,
    taps: &[PosteriorGrid],
    target: &TokenSequence,
    weight: f64,
) -> Result<CombinedCtcLoss> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("intermediate weight {weight} outside [0, 1]")));
    }
    let fin = ctc_loss(final_grid, target)?;
    if taps.is_empty() {
        return Ok(CombinedCtcLoss {
            loss: fin.loss,
            final_loss: fin.loss,
            inter_loss: 0.0,
            final_grad: fin.grad,
            tap_grads: Vec::new(),
        });
    }
    let inter = intermediate_ctc_loss(taps, target)?;
    Ok(CombinedCtcLoss {
        loss: (1.0 - weight) * fin.loss + weight * inter.loss,
        final_loss: fin.loss,
        inter_loss: inter.loss,
        final_grad: fin.grad * (1.0 - weight),
        tap_grads: inter.grads.into_iter().map(|g| g * weight).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid() -> PosteriorGrid {
        PosteriorGrid::from_logits(&array![[0.2, 1.0, -0.3], [1.5, 0.1, 0.0], [0.3, -1.0, 0.7]])
    }

    #[test]
    fn no_taps_is_plain_ctc() {
        let y = TokenSequence(vec![0, 1]);
        let c = combined_ctc_loss(&grid(), &[], &y, 0.5).unwrap();
        let plain = ctc_loss(&grid(), &y).unwrap();
        assert_eq!(c.loss, plain.loss);
        assert_eq!(c.final_grad, plain.grad);
    }

    #[test]
    fn shared_grid_tap_matches_final() {
        let y = TokenSequence(vec![1]);
        let c = combined_ctc_loss(&grid(), &[grid()], &y, 0.5).unwrap();
        assert!((c.inter_loss - c.final_loss).abs() < 1e-15);
        assert!((c.loss - c.final_loss).abs() < 1e-12);
    }

    #[test]
    fn posterior_rows_are_distributions() {
        assert!(IntermediatePosteriors::from_grid(&grid()).max_row_error() < 1e-12);
    }
}
