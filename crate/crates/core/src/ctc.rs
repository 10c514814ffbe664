//! Connectionist temporal classification: the collapse map, path enumeration,
//! forward-backward loss with its gradient, best-path decoding and
//! constrained Viterbi alignment.
//!
//! Grids are stored in the natural-log domain with the blank symbol in the
//! last column, so a vocabulary of `V` tokens yields `V + 1` columns.

use std::ops::Deref;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory. Ordinary tokens are `0..size`; the reserved symbols
/// (blank, mask, sequence start and end) follow in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("vocabulary must contain at least one token"));
        }
        Ok(Vocab { size })
    }

    pub fn tokens(&self) -> std::ops::Range<usize> {
        0..self.size
    }

    pub fn blank(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> usize {
        self.size + 1
    }

    pub fn bos(&self) -> usize {
        self.size + 2
    }

    pub fn eos(&self) -> usize {
        self.size + 3
    }

    /// Width of a CTC posterior row (tokens plus blank).
    pub fn ctc_classes(&self) -> usize {
        self.size + 1
    }

    pub fn is_token(&self, id: usize) -> bool {
        id < self.size
    }
}

/// Output label sequence (no blank, no mask).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| !vocab.is_token(t)) {
            return Err(Error::invalid(format!(
                "token id {bad} is outside the vocabulary of {} tokens",
                vocab.size
            )));
        }
        Ok(TokenSequence(tokens))
    }

    /// Number of positions whose token equals its predecessor. Each such
    /// repeat needs a separating blank frame in any alignment.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum frame count of an alignment that collapses to this sequence.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.adjacent_repeats()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        TokenSequence(v)
    }
}

/// Frame-level label sequence over tokens and blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment(pub Vec<usize>);

impl Deref for Alignment {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for Alignment {
    fn from(v: Vec<usize>) -> Self {
        Alignment(v)
    }
}

/// `T x (V + 1)` matrix of per-frame log posteriors; blank is the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Array2<f64>,
}

const ROW_TOLERANCE: f64 = 1e-9;

impl PosteriorGrid {
    /// Wraps an existing log-probability matrix after checking that each row
    /// is a normalized distribution.
    pub fn new(log_probs: Array2<f64>) -> Result<Self> {
        if log_probs.ncols() < 2 {
            return Err(Error::shape("a posterior grid needs at least one token and blank"));
        }
        for (t, row) in log_probs.rows().into_iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v > ROW_TOLERANCE) {
                return Err(Error::invalid(format!("frame {t} has a log-probability above 0")));
            }
            let total = log_sum_exp_row(row);
            if total.abs() > ROW_TOLERANCE {
                return Err(Error::invalid(format!(
                    "frame {t} log-sum-exps to {total}, expected 0"
                )));
            }
        }
        Ok(PosteriorGrid { log_probs })
    }

    /// Normalizes raw scores with a row-wise log-softmax.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        PosteriorGrid {
            log_probs: log_softmax_rows(logits),
        }
    }

    /// Builds a grid from rows of probabilities (each row must sum to 1).
    pub fn from_probs(probs: &Array2<f64>) -> Result<Self> {
        Self::new(probs.mapv(f64::ln))
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    pub fn into_log_probs(self) -> Array2<f64> {
        self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn blank(&self) -> usize {
        self.log_probs.ncols() - 1
    }

    /// Frame-wise argmax with ties broken toward the lowest class id.
    pub fn argmax_alignment(&self) -> Alignment {
        Alignment(
            self.log_probs
                .rows()
                .into_iter()
                .map(|row| argmax_lowest(row).0)
                .collect(),
        )
    }
}

pub(crate) fn argmax_lowest(row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    (best, best_val)
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp_row(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp_row(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// The collapse map: merge consecutive duplicates, then drop blanks.
pub fn collapse(alignment: &Alignment, vocab: &Vocab) -> Result<TokenSequence> {
    if let Some(bad) = alignment
        .iter()
        .find(|&&z| !vocab.is_token(z) && z != vocab.blank())
    {
        return Err(Error::invalid(format!(
            "alignment label {bad} is neither a token nor blank"
        )));
    }
    Ok(TokenSequence(collapse_ids(alignment, vocab.blank())))
}

pub(crate) fn collapse_ids(frames: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &z in frames {
        if Some(z) != prev && z != blank {
            out.push(z);
        }
        prev = Some(z);
    }
    out
}

/// Every length-`frames` alignment that collapses to `target`.
///
/// Built by walking the blank-interleaved label lattice rather than by
/// filtering all strings, so it can be checked against a brute-force filter.
pub fn enumerate_paths(target: &TokenSequence, frames: usize, blank: usize) -> Vec<Alignment> {
    let expanded = expand_with_blanks(target, blank);
    let mut out = Vec::new();
    if frames == 0 {
        return out;
    }
    let min_left = min_frames_to_end(&expanded, blank);
    let mut path = Vec::with_capacity(frames);

    struct Walk<'a> {
        expanded: &'a [usize],
        blank: usize,
        min_left: &'a [usize],
        frames: usize,
    }

    fn walk(w: &Walk, state: usize, path: &mut Vec<usize>, out: &mut Vec<Alignment>) {
        path.push(w.expanded[state]);
        if path.len() == w.frames {
            if state + 2 >= w.expanded.len() {
                out.push(Alignment(path.clone()));
            }
        } else {
            let left = w.frames - path.len();
            for next in successors(w.expanded, w.blank, state) {
                if w.min_left[next] <= left {
                    walk(w, next, path, out);
                }
            }
        }
        path.pop();
    }

    let w = Walk {
        expanded: &expanded,
        blank,
        min_left: &min_left,
        frames,
    };
    for start in 0..expanded.len().min(2) {
        if min_left[start] <= frames {
            walk(&w, start, &mut path, &mut out);
        }
    }
    out.sort();
    out
}

fn successors(expanded: &[usize], blank: usize, state: usize) -> impl Iterator<Item = usize> {
    let stay = Some(state);
    let step = (state + 1 < expanded.len()).then_some(state + 1);
    let skip = (state + 2 < expanded.len()
        && expanded[state + 2] != blank
        && expanded[state + 2] != expanded[state])
        .then_some(state + 2);
    [stay, step, skip].into_iter().flatten()
}

/// For each lattice state, the fewest frames (counting the current one)
/// needed to reach an accepting state.
fn min_frames_to_end(expanded: &[usize], blank: usize) -> Vec<usize> {
    let n = expanded.len();
    let mut min = vec![usize::MAX; n];
    for s in (0..n).rev() {
        if s + 2 >= n {
            min[s] = 1;
        } else {
            min[s] = 1 + successors(expanded, blank, s)
                .filter(|&x| x != s)
                .map(|x| min[x])
                .min()
                .expect("non-final state has a forward successor");
        }
    }
    min
}

fn expand_with_blanks(target: &[usize], blank: usize) -> Vec<usize> {
    let mut expanded = Vec::with_capacity(2 * target.len() + 1);
    expanded.push(blank);
    for &y in target {
        expanded.push(y);
        expanded.push(blank);
    }
    expanded
}

fn check_feasible(target: &TokenSequence, frames: usize) -> Result<()> {
    if target.min_frames() > frames || frames == 0 {
        return Err(Error::Infeasible {
            target_len: target.len(),
            repeats: target.adjacent_repeats(),
            frames,
        });
    }
    Ok(())
}

fn check_target_ids(grid: &PosteriorGrid, target: &TokenSequence) -> Result<()> {
    if let Some(bad) = target.iter().find(|&&y| y >= grid.blank()) {
        return Err(Error::invalid(format!(
            "target token {bad} does not fit a grid with {} token classes",
            grid.blank()
        )));
    }
    Ok(())
}

/// CTC negative log-likelihood and its gradient with respect to every entry
/// of the log-probability grid.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Log-domain forward-backward over the blank-interleaved target.
pub fn ctc_loss(grid: &PosteriorGrid, target: &TokenSequence) -> Result<CtcLoss> {
    check_target_ids(grid, target)?;
    check_feasible(target, grid.frames())?;
    let lp = grid.log_probs();
    let frames = grid.frames();
    let expanded = expand_with_blanks(target, grid.blank());
    let states = expanded.len();
    let neg = f64::NEG_INFINITY;

    let can_skip = |s: usize| s >= 2 && expanded[s] != grid.blank() && expanded[s] != expanded[s - 2];

    // alpha[t][s]: log prob of prefixes ending in state s at frame t, emission included.
    let mut alpha = Array2::from_elem((frames, states), neg);
    alpha[[0, 0]] = lp[[0, expanded[0]]];
    if states > 1 {
        alpha[[0, 1]] = lp[[0, expanded[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != neg {
                alpha[[t, s]] = acc + lp[[t, expanded[s]]];
            }
        }
    }

    // beta[t][s]: log prob of completing from state s at frame t, emission at t excluded.
    let mut beta = Array2::from_elem((frames, states), neg);
    beta[[frames - 1, states - 1]] = 0.0;
    if states > 1 {
        beta[[frames - 1, states - 2]] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]] + lp[[t + 1, expanded[s]]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]] + lp[[t + 1, expanded[s + 1]]]);
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]] + lp[[t + 1, expanded[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }

    let mut log_z = alpha[[frames - 1, states - 1]];
    if states > 1 {
        log_z = log_add(log_z, alpha[[frames - 1, states - 2]]);
    }
    if !log_z.is_finite() {
        return Err(Error::NonFinite("CTC total path probability underflowed".into()));
    }

    let mut grad = Array2::zeros(lp.raw_dim());
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[[t, s]] + beta[[t, s]];
            if occ != neg {
                grad[[t, expanded[s]]] -= (occ - log_z).exp();
            }
        }
    }
    Ok(CtcLoss { loss: -log_z, grad })
}

/// Result of best-path decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct BestPath {
    pub tokens: TokenSequence,
    /// Per output token: the highest frame probability among the frames of
    /// the argmax run that produced it.
    pub confidences: Vec<f64>,
    pub alignment: Alignment,
}

/// Frame-wise argmax followed by the collapse map.
pub fn best_path_decode(grid: &PosteriorGrid) -> BestPath {
    let blank = grid.blank();
    let mut tokens = Vec::new();
    let mut confidences: Vec<f64> = Vec::new();
    let mut frames = Vec::with_capacity(grid.frames());
    let mut prev = None;
    for row in grid.log_probs().rows() {
        let (z, lp) = argmax_lowest(row);
        let p = lp.exp();
        if z != blank {
            if Some(z) == prev {
                let last = confidences.last_mut().expect("run has a token");
                *last = last.max(p);
            } else {
                tokens.push(z);
                confidences.push(p);
            }
        }
        frames.push(z);
        prev = Some(z);
    }
    BestPath {
        tokens: TokenSequence(tokens),
        confidences,
        alignment: Alignment(frames),
    }
}

/// Highest-probability alignment among those collapsing to `target`.
pub fn viterbi_alignment(grid: &PosteriorGrid, target: &TokenSequence) -> Result<Alignment> {
    check_target_ids(grid, target)?;
    check_feasible(target, grid.frames())?;
    let lp = grid.log_probs();
    let frames = grid.frames();
    let expanded = expand_with_blanks(target, grid.blank());
    let states = expanded.len();
    let neg = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && expanded[s] != grid.blank() && expanded[s] != expanded[s - 2];

    let mut score = Array2::from_elem((frames, states), neg);
    let mut back = Array2::<usize>::zeros((frames, states));
    score[[0, 0]] = lp[[0, expanded[0]]];
    if states > 1 {
        score[[0, 1]] = lp[[0, expanded[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut best = (score[[t - 1, s]], s);
            if s >= 1 && score[[t - 1, s - 1]] > best.0 {
                best = (score[[t - 1, s - 1]], s - 1);
            }
            if can_skip(s) && score[[t - 1, s - 2]] > best.0 {
                best = (score[[t - 1, s - 2]], s - 2);
            }
            if best.0 != neg {
                score[[t, s]] = best.0 + lp[[t, expanded[s]]];
                back[[t, s]] = best.1;
            }
        }
    }
    let mut state = states - 1;
    if states > 1 && score[[frames - 1, states - 2]] > score[[frames - 1, states - 1]] {
        state = states - 2;
    }
    let mut path = vec![0; frames];
    for t in (0..frames).rev() {
        path[t] = expanded[state];
        state = back[[t, state]];
    }
    Ok(Alignment(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const A: usize = 0;
    const B: usize = 1;

    fn vocab(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let v = vocab(2);
        let e = v.blank();
        let c = |z: Vec<usize>| collapse(&Alignment(z), &v).unwrap().0;
        assert_eq!(c(vec![A, A, e, B]), vec![A, B]);
        assert_eq!(c(vec![e, e, e]), Vec::<usize>::new());
        assert_eq!(c(vec![A, e, A]), vec![A, A]);
        assert!(collapse(&Alignment(vec![A, v.mask()]), &v).is_err());
    }

    #[test]
    fn enumerate_small_cases() {
        let e = 2;
        let paths = enumerate_paths(&TokenSequence(vec![A]), 2, e);
        let mut expect = vec![Alignment(vec![A, A]), Alignment(vec![A, e]), Alignment(vec![e, A])];
        expect.sort();
        assert_eq!(paths, expect);
        assert!(enumerate_paths(&TokenSequence(vec![A, A]), 2, e).is_empty());
        assert_eq!(
            enumerate_paths(&TokenSequence(vec![A, A]), 3, e),
            vec![Alignment(vec![A, e, A])]
        );
        // Exhaustive filtering of all 3-frame strings gives 5: aab, abb, eab, aeb, abe.
        assert_eq!(enumerate_paths(&TokenSequence(vec![A, B]), 3, e).len(), 5);
        assert_eq!(
            enumerate_paths(&TokenSequence(vec![]), 3, e),
            vec![Alignment(vec![e, e, e])]
        );
    }

    #[test]
    fn single_frame_loss_is_negative_log_prob() {
        let grid = PosteriorGrid::from_probs(&array![[0.2, 0.5, 0.3]]).unwrap();
        let out = ctc_loss(&grid, &TokenSequence(vec![B])).unwrap();
        assert!((out.loss + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_frame_loss() {
        let grid = PosteriorGrid::from_probs(&array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let out = ctc_loss(&grid, &TokenSequence(vec![A])).unwrap();
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let grid = PosteriorGrid::from_probs(&array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let err = ctc_loss(&grid, &TokenSequence(vec![A, A])).unwrap_err();
        assert!(matches!(err, Error::Infeasible { frames: 2, .. }));
        assert!(viterbi_alignment(&grid, &TokenSequence(vec![A, A])).is_err());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let grid = PosteriorGrid::from_probs(&array![[0.25, 0.75], [0.4, 0.6]]).unwrap();
        let out = ctc_loss(&grid, &TokenSequence(vec![])).unwrap();
        assert!((out.loss + (0.75f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn best_path_collapses_and_reports_confidence() {
        let grid = PosteriorGrid::from_probs(&array![
            [0.6, 0.1, 0.3],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
            [0.2, 0.7, 0.1],
        ])
        .unwrap();
        let out = best_path_decode(&grid);
        assert_eq!(out.alignment.0, vec![A, A, 2, B]);
        assert_eq!(out.tokens.0, vec![A, B]);
        assert!((out.confidences[0] - 0.8).abs() < 1e-12);
        assert!((out.confidences[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn best_path_all_blank_and_ties() {
        let grid = PosteriorGrid::from_probs(&array![[0.1, 0.1, 0.8], [0.1, 0.2, 0.7]]).unwrap();
        assert!(best_path_decode(&grid).tokens.is_empty());
        let tied = PosteriorGrid::from_probs(&array![[0.4, 0.4, 0.2]]).unwrap();
        assert_eq!(best_path_decode(&tied).tokens.0, vec![A]);
    }

    #[test]
    fn viterbi_forced_paths() {
        let grid = PosteriorGrid::from_probs(&array![[0.3, 0.7]]).unwrap();
        assert_eq!(viterbi_alignment(&grid, &TokenSequence(vec![A])).unwrap().0, vec![A]);
        let grid = PosteriorGrid::from_probs(&array![[0.5, 0.5], [0.9, 0.1], [0.5, 0.5]]).unwrap();
        assert_eq!(
            viterbi_alignment(&grid, &TokenSequence(vec![A, A])).unwrap().0,
            vec![A, 1, A]
        );
    }

    #[test]
    fn grid_validation() {
        assert!(PosteriorGrid::new(array![[0.0, 0.0]]).is_err());
        assert!(PosteriorGrid::new(array![[0.5f64.ln(), 0.5f64.ln()]]).is_ok());
    }
}
