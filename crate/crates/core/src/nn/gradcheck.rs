//! Central finite-difference checking of analytic parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter and position of the worst disagreement.
    pub worst: Option<(ParamId, usize, usize)>,
}

/// Compares `loss_fn`'s analytic gradient with central differences on
/// `sample_count` scalar parameters drawn uniformly over all parameter
/// entries. `loss_fn` must return the loss and the gradient at the store's
/// current values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (loss, grads) = loss_fn(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let sizes: Vec<(ParamId, usize)> = store.ids().map(|id| (id, store.value(id).len())).collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for _ in 0..sample_count {
        let mut flat = rng.random_range(0..total);
        let (id, _) = *sizes
            .iter()
            .find(|(_, n)| {
                if flat < *n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .expect("index within total");
        let cols = store.value(id).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let original = store.value(id)[[r, c]];
        store.value_mut(id)[[r, c]] = original + h;
        let plus = loss_fn(store)?.0;
        store.value_mut(id)[[r, c]] = original - h;
        let minus = loss_fn(store)?.0;
        store.value_mut(id)[[r, c]] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("loss under perturbation".into()));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.scalar(id, r, c);
        let rel = relative_error(analytic, numeric);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((id, r, c));
        }
        report.checked += 1;
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::params::Init;

    fn quadratic(store: &ParamStore, id: ParamId) -> (f64, Grads) {
        let mut g = Graph::new(store);
        let w = g.param(id);
        let sq = g.mul(w, w);
        let v = g.value(sq).sum();
        let seed = ndarray::Array2::ones(g.value(sq).raw_dim());
        (v, g.backward(&[(sq, seed)]))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new(3);
        let id = store.add("w", 4, 4, Init::Normal(1.0));
        let report = grad_check(&mut store, |s| Ok(quadratic(s, id)), 1e-5, 16, 0).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut store = ParamStore::new(3);
        let id = store.add("w", 4, 4, Init::Normal(1.0));
        let report = grad_check(
            &mut store,
            |s| {
                let (l, mut g) = quadratic(s, id);
                g.scale(1.1);
                Ok((l, g))
            },
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
