//! Adam with the Noam warmup schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn noam_lr(step: u64, warmup: u64, factor: f64, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("Noam schedule steps start at 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid("Noam warmup must be positive"));
    }
    let step = step as f64;
    let warmup = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub lr_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 400,
            lr_factor: 1.0,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    d_model: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig, d_model: usize) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Array2::zeros(store.value(id).raw_dim()))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
            d_model,
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        noam_lr(self.step.max(1), self.config.warmup, self.config.lr_factor, self.d_model)
    }
}

/// One bias-corrected Adam update at the Noam learning rate of the new step.
/// Returns the learning rate that was applied.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut OptimizerState) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let c = state.config;
    let lr = noam_lr(state.step, c.warmup, c.lr_factor, state.d_model)?;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (idx, slot) in grads.slots().iter().enumerate() {
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        match slot {
            Some(g) => {
                Zip::from(&mut *m).and(g).for_each(|m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                Zip::from(&mut *v)
                    .and(g)
                    .for_each(|v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            }
            None => {
                m.mapv_inplace(|m| c.beta1 * m);
                v.mapv_inplace(|v| c.beta2 * v);
            }
        }
        let id = super::params::ParamId(idx);
        Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + c.eps);
        });
    }
    Ok(lr)
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn noam_peak_and_decay() {
        let peak = noam_lr(100, 100, 1.0, 64).unwrap();
        let before = noam_lr(99, 100, 1.0, 64).unwrap();
        let after = noam_lr(101, 100, 1.0, 64).unwrap();
        assert!(peak > before && peak > after);
        // step^-0.5 == step * warmup^-1.5 at step == warmup
        assert!((peak - 64f64.powf(-0.5) * 0.1).abs() < 1e-15);
        let later = noam_lr(400, 100, 1.0, 64).unwrap();
        assert!((later - peak / 2.0).abs() < 1e-15);
        assert_eq!(noam_lr(10, 100, 0.0, 64).unwrap(), 0.0);
        assert!(noam_lr(0, 100, 1.0, 64).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", 2, 3, Init::Normal(1.0));
        let before = store.value(id).clone();
        let mut state = OptimizerState::new(&store, AdamConfig::default(), 4);
        let mut grads = Grads::empty(&store);
        grads.accumulate(id, Array2::zeros((2, 3)));
        adam_step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(store.value(id), &before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", 1, 2, Init::Zeros);
        let mut state = OptimizerState::new(&store, AdamConfig::default(), 4);
        let mut grads = Grads::empty(&store);
        grads.accumulate(id, ndarray::array![[0.3, -2.0]]);
        let lr = adam_step(&mut store, &grads, &mut state).unwrap();
        // Bias correction makes mhat = g and vhat = g^2 on the first step.
        let w = store.value(id);
        assert!((w[[0, 0]] + lr).abs() < 1e-12 * lr.max(1.0) + lr * 1e-8);
        assert!((w[[0, 1]] - lr).abs() < lr * 1e-8);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", 1, 1, Init::Zeros);
        let mut state = OptimizerState::new(&store, AdamConfig::default(), 4);
        let mut grads = Grads::empty(&store);
        grads.accumulate(id, ndarray::array![[f64::NAN]]);
        assert!(adam_step(&mut store, &grads, &mut state).is_err());
    }
}
