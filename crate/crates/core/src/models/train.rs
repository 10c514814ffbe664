//! Mini-batch training with Adam, the Noam schedule, gradient clipping and
//! optional parameter averaging over the end of the run.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::nn::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use crate::nn::{Grads, ParamStore};

use super::checkpoint::average_checkpoints;
use super::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Mean per-utterance loss of every step.
    pub step_losses: Vec<f64>,
    /// Snapshots averaged into the final parameters.
    pub averaged: usize,
}

impl TrainReport {
    /// Mean step loss over consecutive windows of `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.step_losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Per-(step, utterance) stream so every sampled quantity is reproducible.
pub fn utterance_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mut z = seed
        ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (slot as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Total optimizer steps for `n` training utterances.
pub fn planned_steps(model: &Model, n: usize) -> u64 {
    let tc = &model.config.train;
    let per_epoch = n.div_ceil(tc.batch_size.max(1)) as f64;
    let steps = (per_epoch * tc.epochs).ceil().max(0.0) as u64;
    match tc.max_steps {
        Some(cap) => steps.min(cap),
        None => steps,
    }
}

/// Steps after which a snapshot is kept for averaging.
fn snapshot_steps(total: u64, count: usize, window: f64) -> Vec<u64> {
    if count <= 1 || total == 0 {
        return vec![total];
    }
    let span = ((total as f64) * window.clamp(0.0, 1.0)).floor() as u64;
    let gap = (span / (count as u64 - 1).max(1)).max(1);
    let mut steps: Vec<u64> = (0..count as u64)
        .map(|k| total.saturating_sub(k * gap))
        .filter(|&s| s >= 1)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// Trains `model` in place on `data`. `progress` sees every step and its
/// mean loss.
pub fn train(
    model: &mut Model,
    data: &[Utterance],
    mut progress: Option<&mut dyn FnMut(u64, f64)>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    let tc = model.config.train.clone();
    if tc.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let inputs: Vec<(Array2<f64>, TokenSequence)> = data
        .iter()
        .map(|u| {
            if u.dim != model.feat_dim {
                return Err(Error::shape(format!("{} has {} feature dims", u.id, u.dim)));
            }
            Ok((u.features_f64(), u.transcript.clone()))
        })
        .collect::<Result<_>>()?;
    let total = planned_steps(model, inputs.len());
    let snapshots_at = snapshot_steps(total, tc.average_last, tc.average_window);
    let adam = AdamConfig {
        warmup: tc.warmup,
        lr_factor: tc.lr_factor,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(&model.store, adam, model.config.model.d_model);
    let mut snapshots: Vec<ParamStore> = Vec::new();
    let mut step_losses = Vec::with_capacity(total as usize);
    let per_epoch = inputs.len().div_ceil(tc.batch_size) as u64;
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=total {
        let (epoch, within) = ((step - 1) / per_epoch, ((step - 1) % per_epoch) as usize);
        if within == 0 {
            order = (0..inputs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch)));
        }
        let start = within * tc.batch_size;
        let batch = &order[start..(start + tc.batch_size).min(order.len())];
        let mut grads = Grads::empty(&model.store);
        let mut loss_sum = 0.0;
        for (slot, &idx) in batch.iter().enumerate() {
            let (x, y) = &inputs[idx];
            let mut rng = utterance_rng(tc.seed, step, slot);
            let out = model.loss(x, y, &mut rng, true)?;
            loss_sum += out.loss;
            grads.add_assign(&out.grads);
        }
        grads.scale(1.0 / batch.len() as f64);
        clip_grad_norm(&mut grads, tc.grad_clip);
        adam_step(&mut model.store, &grads, &mut state)?;
        let mean = loss_sum / batch.len() as f64;
        step_losses.push(mean);
        if let Some(cb) = progress.as_mut() {
            cb(step, mean);
        }
        if tc.average_last > 1 && snapshots_at.contains(&step) {
            snapshots.push(model.store.clone());
        }
    }
    let averaged = snapshots.len();
    if averaged > 1 {
        model.store = average_checkpoints(&snapshots)?;
    }
    Ok(TrainReport {
        steps: total,
        step_losses,
        averaged: averaged.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_schedule() {
        assert_eq!(snapshot_steps(100, 1, 0.2), vec![100]);
        assert_eq!(snapshot_steps(100, 5, 0.2), vec![80, 85, 90, 95, 100]);
        assert_eq!(snapshot_steps(3, 5, 0.2), vec![1, 2, 3]);
    }
}
