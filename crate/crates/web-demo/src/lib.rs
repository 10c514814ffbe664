//! Three interactive views over the core library, exported to JavaScript.
//! Every export takes plain numbers or strings and returns a JSON string.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use nar_core::cif::cif_weights;
use nar_core::ctc::{best_path_decode, ctc_loss, enumerate_paths, PosteriorGrid, TokenSequence};
use nar_core::insertion::bbt_schedule;

/// Alignments listed by the lattice view.
const MAX_LISTED_PATHS: usize = 24;
/// Enumeration is skipped above this many frames.
const MAX_ENUM_FRAMES: usize = 12;

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("{what}: cannot read {s:?}")))
        .collect()
}

#[derive(Serialize)]
struct PathEntry {
    alignment: Vec<usize>,
    prob: f64,
}

#[derive(Serialize)]
struct Lattice {
    classes: usize,
    blank: usize,
    probs: Vec<Vec<f64>>,
    loss: Option<f64>,
    target_prob: Option<f64>,
    best_alignment: Vec<usize>,
    best_tokens: Vec<usize>,
    path_count: Option<usize>,
    paths: Vec<PathEntry>,
}

/// Random posterior grid whose frames lean toward a spread-out copy of the
/// target; `sharpness` scales how strongly.
fn demo_grid(target: &[usize], frames: usize, classes: usize, sharpness: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blank = classes - 1;
    Array2::from_shape_fn((frames, classes), |(t, c)| {
        let lean = if target.is_empty() {
            blank
        } else {
            let k = (t * 2 * target.len()) / frames.max(1);
            if k % 2 == 1 {
                target[k / 2]
            } else {
                blank
            }
        };
        let bump = if c == lean { sharpness } else { 0.0 };
        bump + rng.random::<f64>() * 1.5
    })
}

pub fn lattice_json(target: &str, frames: usize, vocab: usize, sharpness: f64, seed: u64) -> Result<String, String> {
    if vocab == 0 || vocab > 26 {
        return Err("vocabulary size must be between 1 and 26".into());
    }
    if frames == 0 || frames > 40 {
        return Err("frame count must be between 1 and 40".into());
    }
    let target: Vec<usize> = parse_list(target, "target")?;
    if let Some(t) = target.iter().find(|&&t| t >= vocab) {
        return Err(format!("token {t} is outside a vocabulary of {vocab}"));
    }
    let classes = vocab + 1;
    let grid = PosteriorGrid::from_logits(&demo_grid(&target, frames, classes, sharpness, seed));
    let y = TokenSequence(target);
    let best = best_path_decode(&grid);
    let loss = ctc_loss(&grid, &y).ok().map(|l| l.loss);
    let lp = grid.log_probs();
    let (path_count, paths) = if frames <= MAX_ENUM_FRAMES {
        let all = enumerate_paths(&y, frames, vocab);
        let mut scored: Vec<PathEntry> = all
            .iter()
            .map(|a| PathEntry {
                alignment: a.0.clone(),
                prob: a.iter().enumerate().map(|(t, &c)| lp[[t, c]]).sum::<f64>().exp(),
            })
            .collect();
        scored.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        scored.truncate(MAX_LISTED_PATHS);
        (Some(all.len()), scored)
    } else {
        (None, Vec::new())
    };
    let lattice = Lattice {
        classes,
        blank: vocab,
        probs: lp.rows().into_iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect(),
        loss,
        target_prob: loss.map(|l| (-l).exp()),
        best_alignment: best.alignment.0,
        best_tokens: best.tokens.0,
        path_count,
        paths,
    };
    serde_json::to_string(&lattice).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Schedule {
    rounds: Vec<Vec<usize>>,
    /// Hypothesis (as target positions) after each round.
    states: Vec<Vec<usize>>,
}

pub fn schedule_json(len: usize) -> Result<String, String> {
    if len > 256 {
        return Err("length must be at most 256".into());
    }
    let target: Vec<usize> = (0..len).collect();
    let s = bbt_schedule(&target);
    let mut done: Vec<usize> = Vec::new();
    let mut states = Vec::new();
    for round in &s.positions {
        done.extend(round);
        done.sort_unstable();
        states.push(done.clone());
    }
    serde_json::to_string(&Schedule {
        rounds: s.positions,
        states,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Firing {
    /// Embeddings x frames.
    weights: Vec<Vec<f64>>,
    /// Frame at which each embedding fired (its last contributing frame).
    fire_frames: Vec<usize>,
    cumulative: Vec<f64>,
    leftover: f64,
}

pub fn firing_json(alphas: &str, threshold: f64, emit_tail: bool) -> Result<String, String> {
    let alphas: Vec<f64> = parse_list(alphas, "weights")?;
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err("weights must be finite and non-negative".into());
    }
    if !(threshold > 0.0) {
        return Err("threshold must be positive".into());
    }
    let (w, cumulative) = cif_weights(&alphas, threshold, emit_tail);
    let used: f64 = w.sum();
    let fire_frames = w
        .rows()
        .into_iter()
        .map(|r| r.iter().rposition(|&x| x > 0.0).unwrap_or(0))
        .collect();
    serde_json::to_string(&Firing {
        weights: w.rows().into_iter().map(|r| r.to_vec()).collect(),
        fire_frames,
        leftover: cumulative.last().copied().unwrap_or(0.0) - used,
        cumulative,
    })
    .map_err(|e| e.to_string())
}

/// Posterior grid, loss, best path and the most likely alignments of
/// `target` (comma-separated token ids).
#[wasm_bindgen]
pub fn ctc_lattice(target: &str, frames: u32, vocab: u32, sharpness: f64, seed: u32) -> Result<String, JsError> {
    lattice_json(target, frames as usize, vocab as usize, sharpness, seed as u64).map_err(|e| JsError::new(&e))
}

/// Tree-order insertion rounds for a target of `len` tokens.
#[wasm_bindgen]
pub fn insertion_order(len: u32) -> Result<String, JsError> {
    schedule_json(len as usize).map_err(|e| JsError::new(&e))
}

/// Integrate-and-fire over comma-separated frame weights.
#[wasm_bindgen]
pub fn cif_firing(alphas: &str, threshold: f64, emit_tail: bool) -> Result<String, JsError> {
    firing_json(alphas, threshold, emit_tail).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_lists_paths_that_sum_to_the_target_probability() {
        let v: serde_json::Value = serde_json::from_str(&lattice_json("0,1", 4, 2, 2.0, 1).unwrap()).unwrap();
        let listed: f64 = v["paths"].as_array().unwrap().iter().map(|p| p["prob"].as_f64().unwrap()).sum();
        assert_eq!(v["path_count"].as_u64().unwrap() as usize, v["paths"].as_array().unwrap().len());
        assert!((listed - v["target_prob"].as_f64().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_for_seven() {
        let v: serde_json::Value = serde_json::from_str(&schedule_json(7).unwrap()).unwrap();
        assert_eq!(v["rounds"], serde_json::json!([[3], [1, 5], [0, 2, 4, 6]]));
    }

    #[test]
    fn firing_splits_the_crossing_frame() {
        let v: serde_json::Value = serde_json::from_str(&firing_json("0.4, 0.4, 0.4, 0.9", 1.0, false).unwrap()).unwrap();
        assert_eq!(v["fire_frames"], serde_json::json!([2, 3]));
        assert!((v["leftover"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(lattice_json("5", 4, 2, 1.0, 0).is_err());
        assert!(firing_json("0.5, x", 1.0, false).is_err());
        assert!(firing_json("0.5", 0.0, false).is_err());
    }
}
