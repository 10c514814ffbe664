//! Wall-clock decode benchmark. Decoding runs on the calling thread only.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::models::{Method, Model};

/// Points in a benchmark run reported to [`BenchHooks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchPhase {
    /// Features converted to decoder input; happens once, before any timing.
    Prepared,
    WarmupStart,
    WarmupEnd,
    TimingStart,
    TimingEnd,
}

pub trait BenchHooks {
    fn phase(&mut self, method: Option<Method>, phase: BenchPhase);
}

impl BenchHooks for () {
    fn phase(&mut self, _: Option<Method>, _: BenchPhase) {}
}

impl<F: FnMut(Option<Method>, BenchPhase)> BenchHooks for F {
    fn phase(&mut self, method: Option<Method>, phase: BenchPhase) {
        self(method, phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodBench {
    pub method: String,
    /// Mean over utterances of the per-utterance time averaged over reps.
    pub mean_ms: f64,
    pub median_ms: f64,
    pub iterations: IterationStats,
    /// Greedy autoregressive time over this method's time on the same
    /// utterances; absent without an autoregressive model in the set.
    pub speedup_vs_ar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub reps: usize,
    pub threads: usize,
    pub methods: Vec<MethodBench>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Decodes every utterance with every model: one untimed warmup pass, then
/// `reps` timed passes. Iteration counts come from the warmup pass.
pub fn bench_decode(
    models: &[&Model],
    data: &[Utterance],
    reps: usize,
    hooks: &mut dyn BenchHooks,
) -> Result<BenchReport> {
    if models.is_empty() || data.is_empty() {
        return Err(Error::invalid("benchmark needs at least one model and one utterance"));
    }
    if reps == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    let inputs: Vec<Array2<f64>> = data.iter().map(Utterance::features_f64).collect();
    for m in models {
        if m.feat_dim != data[0].dim {
            return Err(Error::shape(format!(
                "{} model expects {} feature dims, data has {}",
                m.method, m.feat_dim, data[0].dim
            )));
        }
    }
    hooks.phase(None, BenchPhase::Prepared);
    let mut methods = Vec::with_capacity(models.len());
    let mut means = Vec::with_capacity(models.len());
    for model in models {
        let method = Some(model.method);
        hooks.phase(method, BenchPhase::WarmupStart);
        let iterations = inputs
            .iter()
            .map(|x| model.decode(x).map(|r| r.iterations))
            .collect::<Result<Vec<_>>>()?;
        hooks.phase(method, BenchPhase::WarmupEnd);

        hooks.phase(method, BenchPhase::TimingStart);
        let mut per_utt = vec![0.0; inputs.len()];
        for _ in 0..reps {
            for (slot, x) in per_utt.iter_mut().zip(&inputs) {
                let start = Instant::now();
                let out = model.decode(x)?;
                *slot += start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(out);
            }
        }
        hooks.phase(method, BenchPhase::TimingEnd);

        per_utt.iter_mut().for_each(|t| *t /= reps as f64);
        let mean_ms = per_utt.iter().sum::<f64>() / per_utt.len() as f64;
        let total: usize = iterations.iter().sum();
        means.push(mean_ms);
        methods.push(MethodBench {
            method: model.method.to_string(),
            mean_ms,
            median_ms: median(&mut per_utt),
            iterations: IterationStats {
                mean: total as f64 / iterations.len() as f64,
                min: *iterations.iter().min().expect("non-empty"),
                max: *iterations.iter().max().expect("non-empty"),
                total,
            },
            speedup_vs_ar: None,
        });
    }
    if let Some(base) = models.iter().position(|m| m.method == Method::Ar) {
        let base_ms = means[base];
        for (m, &ms) in methods.iter_mut().zip(&means) {
            m.speedup_vs_ar = Some(base_ms / ms);
        }
    }
    Ok(BenchReport {
        utterances: inputs.len(),
        reps,
        threads: 1,
        methods,
    })
}
