//! Masked-token training targets, mask-predict refinement of a CTC seed, and
//! the length-prediction extension that resizes masked runs.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::ctc::{argmax_lowest, best_path_decode, PosteriorGrid, TokenSequence, Vocab};
use crate::error::{Error, Result};

/// A target with some positions replaced by the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPair {
    pub observed: Vec<usize>,
    /// `(position, true token)`, sorted by position.
    pub hidden: Vec<(usize, usize)>,
}

impl MaskedPair {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let mut last = None;
        for &(pos, tok) in &self.hidden {
            if pos >= self.observed.len() {
                return Err(Error::invalid(format!("hidden position {pos} out of range")));
            }
            if last.is_some_and(|l| l >= pos) {
                return Err(Error::invalid("hidden positions must be sorted and distinct"));
            }
            if !vocab.is_token(tok) {
                return Err(Error::invalid(format!("hidden token {tok} is not a vocabulary token")));
            }
            last = Some(pos);
        }
        let masked = self.observed.iter().filter(|&&t| t == vocab.mask()).count();
        if masked != self.hidden.len() || self.hidden.iter().any(|&(p, _)| self.observed[p] != vocab.mask()) {
            return Err(Error::invalid("mask ids do not match hidden positions"));
        }
        Ok(())
    }
}

/// Token sequence under refinement. Masked positions carry confidence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl Hypothesis {
    pub fn new(tokens: Vec<usize>, confidence: Vec<f64>, vocab: &Vocab) -> Result<Self> {
        if tokens.len() != confidence.len() {
            return Err(Error::invalid("token and confidence lengths differ"));
        }
        for (&t, &c) in tokens.iter().zip(&confidence) {
            if t == vocab.mask() {
                if c != 0.0 {
                    return Err(Error::invalid("masked position with nonzero confidence"));
                }
            } else if !vocab.is_token(t) {
                return Err(Error::invalid(format!("hypothesis id {t} is neither token nor mask")));
            } else if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(Hypothesis { tokens, confidence })
    }

    /// Best-path output of `grid` with positions below `p_thr` masked.
    pub fn from_ctc(grid: &PosteriorGrid, p_thr: f64, vocab: &Vocab) -> Self {
        let best = best_path_decode(grid);
        let mut tokens = best.tokens.into_inner();
        let mut confidence = best.confidences;
        for (t, c) in tokens.iter_mut().zip(confidence.iter_mut()) {
            if *c < p_thr {
                *t = vocab.mask();
                *c = 0.0;
            }
        }
        Hypothesis { tokens, confidence }
    }

    pub fn mask_count(&self, vocab: &Vocab) -> usize {
        self.tokens.iter().filter(|&&t| t == vocab.mask()).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-placeholder run lengths, clamped to the classifier's last class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthLabels(pub Vec<usize>);

/// How many positions [`random_mask`] hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskCount {
    /// Uniform over `1..=L`.
    Uniform,
    Fixed(usize),
}

/// Hides a random subset of `target`.
pub fn random_mask<R: Rng + ?Sized>(
    target: &TokenSequence,
    vocab: &Vocab,
    count: MaskCount,
    rng: &mut R,
) -> Result<MaskedPair> {
    let len = target.len();
    if len == 0 {
        return Err(Error::invalid("cannot mask an empty target"));
    }
    let n = match count {
        MaskCount::Uniform => rng.random_range(1..=len),
        MaskCount::Fixed(n) if (1..=len).contains(&n) => n,
        MaskCount::Fixed(n) => {
            return Err(Error::invalid(format!("mask count {n} outside 1..={len}")));
        }
    };
    let mut positions = sample(rng, len, n).into_vec();
    positions.sort_unstable();
    let mut observed = target.to_vec();
    let hidden = positions
        .iter()
        .map(|&p| {
            observed[p] = vocab.mask();
            (p, target[p])
        })
        .collect();
    Ok(MaskedPair { observed, hidden })
}

/// A span-masked training example for the length head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMasked {
    /// Target with each masked run collapsed to a single placeholder.
    pub placeholders: Vec<usize>,
    /// True run length per placeholder (unclamped).
    pub lengths: Vec<usize>,
    /// Target with every masked token replaced by its own mask.
    pub expanded: MaskedPair,
}

/// Masks contiguous spans with geometric lengths of mean `span_mean` and
/// occasionally inserts empty placeholders. At least one token is masked.
pub fn span_mask<R: Rng + ?Sized>(
    target: &TokenSequence,
    vocab: &Vocab,
    span_mean: f64,
    rng: &mut R,
) -> Result<SpanMasked> {
    if target.is_empty() {
        return Err(Error::invalid("cannot mask an empty target"));
    }
    if span_mean < 1.0 {
        return Err(Error::invalid("mean span length must be at least 1"));
    }
    let geo = Geometric::new(1.0 / span_mean).map_err(|e| Error::invalid(e.to_string()))?;
    let len = target.len();
    let rate: f64 = rng.random_range(0.05..0.5);
    // Each entry: (start, run length) in target coordinates.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut pos = 0;
    while pos <= len {
        if pos < len && rng.random::<f64>() < rate {
            let run = (1 + geo.sample(rng) as usize).min(len - pos);
            runs.push((pos, run));
            pos += run + 1;
        } else {
            if rng.random::<f64>() < rate * 0.1 {
                runs.push((pos, 0));
            }
            pos += 1;
        }
    }
    if !runs.iter().any(|&(_, n)| n > 0) {
        let p = rng.random_range(0..len);
        runs.retain(|&(s, _)| s != p && s != p + 1);
        runs.push((p, 1));
        runs.sort_unstable();
    }
    let mut placeholders = Vec::with_capacity(len);
    let mut lengths = Vec::with_capacity(runs.len());
    let mut expanded = target.to_vec();
    let mut hidden = Vec::new();
    let mut cursor = 0;
    for &(start, run) in &runs {
        placeholders.extend_from_slice(&target[cursor..start]);
        placeholders.push(vocab.mask());
        lengths.push(run);
        for p in start..start + run {
            expanded[p] = vocab.mask();
            hidden.push((p, target[p]));
        }
        cursor = start + run;
    }
    placeholders.extend_from_slice(&target[cursor..]);
    Ok(SpanMasked {
        placeholders,
        lengths,
        expanded: MaskedPair {
            observed: expanded,
            hidden,
        },
    })
}

/// Negative log-likelihood of `targets` (`(row, class)` pairs) under
/// row-wise log-probabilities, with its gradient.
pub fn masked_nll(log_probs: &Array2<f64>, targets: &[(usize, usize)]) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(log_probs.raw_dim());
    let mut loss = 0.0;
    for &(row, class) in targets {
        if row >= log_probs.nrows() || class >= log_probs.ncols() {
            return Err(Error::invalid(format!(
                "target ({row}, {class}) outside {}x{} log-probabilities",
                log_probs.nrows(),
                log_probs.ncols()
            )));
        }
        loss -= log_probs[[row, class]];
        grad[[row, class]] -= 1.0;
    }
    Ok((loss, grad))
}

/// Masked-token loss: NLL at hidden positions only.
pub fn cmlm_loss(decoder_log_probs: &Array2<f64>, pair: &MaskedPair) -> Result<(f64, Array2<f64>)> {
    if decoder_log_probs.nrows() != pair.observed.len() {
        return Err(Error::shape(format!(
            "decoder produced {} positions for {} observed",
            decoder_log_probs.nrows(),
            pair.observed.len()
        )));
    }
    masked_nll(decoder_log_probs, &pair.hidden)
}

/// Run length covered by each placeholder of `observed`, where a placeholder
/// stands for zero or more target tokens. Ambiguous matches give earlier
/// placeholders the shortest runs.
pub fn length_labels(target: &TokenSequence, observed: &[usize], vocab: &Vocab) -> Result<LengthLabels> {
    let n = observed.len();
    let m = target.len();
    // reach[i][j]: observed[i..] can match target[j..].
    let mut reach = vec![vec![false; m + 1]; n + 1];
    reach[n][m] = true;
    for i in (0..n).rev() {
        for j in (0..=m).rev() {
            reach[i][j] = if observed[i] == vocab.mask() {
                reach[i + 1][j] || (j < m && reach[i][j + 1])
            } else {
                j < m && observed[i] == target[j] && reach[i + 1][j + 1]
            };
        }
    }
    if !reach[0][0] {
        return Err(Error::invalid("observed sequence is not a placeholder view of the target"));
    }
    let mut labels = Vec::new();
    let mut j = 0;
    for i in 0..n {
        if observed[i] == vocab.mask() {
            let mut run = 0;
            while !reach[i + 1][j + run] {
                run += 1;
            }
            labels.push(run);
            j += run;
        } else {
            j += 1;
        }
    }
    Ok(LengthLabels(labels))
}

/// Clamps run lengths into `classes` length classes.
pub fn clamp_lengths(lengths: &[usize], classes: usize) -> LengthLabels {
    LengthLabels(lengths.iter().map(|&n| n.min(classes.saturating_sub(1))).collect())
}

/// Expands every placeholder into as many masks as its predicted length.
pub fn adjust_masks(hyp: &Hypothesis, lengths: &LengthLabels, vocab: &Vocab) -> Result<Hypothesis> {
    let placeholders = hyp.mask_count(vocab);
    if placeholders != lengths.0.len() {
        return Err(Error::invalid(format!(
            "{} predicted lengths for {placeholders} placeholders",
            lengths.0.len()
        )));
    }
    let mut next = lengths.0.iter();
    let mut tokens = Vec::new();
    let mut confidence = Vec::new();
    for (&t, &c) in hyp.tokens.iter().zip(&hyp.confidence) {
        if t == vocab.mask() {
            let n = *next.next().expect("count checked above");
            tokens.extend(std::iter::repeat_n(t, n));
            confidence.extend(std::iter::repeat_n(0.0, n));
        } else {
            tokens.push(t);
            confidence.push(c);
        }
    }
    Ok(Hypothesis { tokens, confidence })
}

/// Merges each run of consecutive masks into one placeholder.
pub fn merge_mask_runs(hyp: &Hypothesis, vocab: &Vocab) -> Hypothesis {
    let mut tokens = Vec::with_capacity(hyp.len());
    let mut confidence = Vec::with_capacity(hyp.len());
    for (&t, &c) in hyp.tokens.iter().zip(&hyp.confidence) {
        if t == vocab.mask() && tokens.last() == Some(&vocab.mask()) {
            continue;
        }
        tokens.push(t);
        confidence.push(c);
    }
    Hypothesis { tokens, confidence }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub tokens: TokenSequence,
    /// Mask-filling decoder passes.
    pub iterations: usize,
    /// Positions masked before the first pass.
    pub masked: usize,
    /// Length-prediction passes (0 or 1).
    pub length_passes: usize,
}

/// Log-probabilities over vocabulary tokens for every position of the
/// observed sequence.
pub type MaskPredictor<'a> = dyn FnMut(&[usize]) -> Result<Array2<f64>> + 'a;

/// Predicted run length for every placeholder of the observed sequence.
pub type LengthPredictor<'a> = dyn FnMut(&[usize]) -> Result<Vec<usize>> + 'a;

/// Fills the masks of `hyp` over exactly `k` decoder passes (none if nothing
/// is masked). After pass `i`, `floor(m * (k - i) / k)` of the `m` initial
/// masks remain; each pass fills the masks the decoder is most sure of.
pub fn refine(
    mut hyp: Hypothesis,
    predictor: &mut MaskPredictor<'_>,
    k: usize,
    vocab: &Vocab,
) -> Result<(Hypothesis, usize)> {
    if k == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    let m = hyp.mask_count(vocab);
    if m == 0 {
        return Ok((hyp, 0));
    }
    for pass in 1..=k {
        let log_probs = predictor(&hyp.tokens)?;
        if log_probs.nrows() != hyp.len() || log_probs.ncols() != vocab.size {
            return Err(Error::shape(format!(
                "predictor returned {}x{}, expected {}x{}",
                log_probs.nrows(),
                log_probs.ncols(),
                hyp.len(),
                vocab.size
            )));
        }
        let mut candidates: Vec<(usize, usize, f64)> = hyp
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == vocab.mask())
            .map(|(p, _)| {
                let (tok, lp) = argmax_lowest(log_probs.row(p));
                (p, tok, lp)
            })
            .collect();
        let remaining = m * (k - pass) / k;
        let fill = candidates.len().saturating_sub(remaining);
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        for &(p, tok, lp) in candidates.iter().take(fill) {
            hyp.tokens[p] = tok;
            hyp.confidence[p] = lp.exp();
        }
    }
    Ok((hyp, k))
}

/// CTC seed, confidence masking, then `k` rounds of mask filling.
pub fn mask_ctc_decode(
    grid: &PosteriorGrid,
    predictor: &mut MaskPredictor<'_>,
    p_thr: f64,
    k: usize,
    vocab: &Vocab,
) -> Result<RefineOutcome> {
    check_threshold(p_thr)?;
    let hyp = Hypothesis::from_ctc(grid, p_thr, vocab);
    let masked = hyp.mask_count(vocab);
    let (hyp, iterations) = refine(hyp, predictor, k, vocab)?;
    Ok(RefineOutcome {
        tokens: TokenSequence(hyp.tokens),
        iterations,
        masked,
        length_passes: 0,
    })
}

/// Like [`mask_ctc_decode`], but masked runs are first merged into single
/// placeholders and resized by one length-prediction pass.
pub fn improved_mask_ctc_decode(
    grid: &PosteriorGrid,
    lengths: &mut LengthPredictor<'_>,
    predictor: &mut MaskPredictor<'_>,
    p_thr: f64,
    k: usize,
    vocab: &Vocab,
) -> Result<RefineOutcome> {
    check_threshold(p_thr)?;
    let hyp = merge_mask_runs(&Hypothesis::from_ctc(grid, p_thr, vocab), vocab);
    let placeholders = hyp.mask_count(vocab);
    if placeholders == 0 {
        return Ok(RefineOutcome {
            tokens: TokenSequence(hyp.tokens),
            iterations: 0,
            masked: 0,
            length_passes: 0,
        });
    }
    let predicted = lengths(&hyp.tokens)?;
    let hyp = adjust_masks(&hyp, &LengthLabels(predicted), vocab)?;
    let masked = hyp.mask_count(vocab);
    let (hyp, iterations) = refine(hyp, predictor, k, vocab)?;
    Ok(RefineOutcome {
        tokens: TokenSequence(hyp.tokens),
        iterations,
        masked,
        length_passes: 1,
    })
}

fn check_threshold(p_thr: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p_thr) {
        return Err(Error::invalid(format!("confidence threshold {p_thr} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(5).unwrap()
    }

    #[test]
    fn full_and_single_masks() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = random_mask(&TokenSequence(vec![0, 1, 2]), &v, MaskCount::Fixed(3), &mut rng).unwrap();
        assert_eq!(pair.observed, vec![v.mask(); 3]);
        assert_eq!(pair.hidden, vec![(0, 0), (1, 1), (2, 2)]);
        let pair = random_mask(&TokenSequence(vec![4]), &v, MaskCount::Uniform, &mut rng).unwrap();
        assert_eq!(pair.observed, vec![v.mask()]);
        assert!(random_mask(&TokenSequence(vec![]), &v, MaskCount::Uniform, &mut rng).is_err());
    }

    #[test]
    fn cmlm_loss_reads_hidden_positions_only() {
        let v = vocab();
        let lp = array![[-0.1, -3.0], [-2.0, -0.5]];
        let pair = MaskedPair {
            observed: vec![v.mask(), 1],
            hidden: vec![(0, 0)],
        };
        let (loss, grad) = cmlm_loss(&lp, &pair).unwrap();
        assert!((loss - 0.1).abs() < 1e-15);
        assert_eq!(grad, array![[-1.0, 0.0], [0.0, 0.0]]);
        let none = MaskedPair {
            observed: vec![0, 1],
            hidden: vec![],
        };
        assert_eq!(cmlm_loss(&lp, &none).unwrap().0, 0.0);
    }

    #[test]
    fn placeholder_lengths_round_trip() {
        let v = vocab();
        let m = v.mask();
        let y = TokenSequence(vec![0, 1, 2, 3]);
        let labels = length_labels(&y, &[0, m, 3, m], &v).unwrap();
        assert_eq!(labels, LengthLabels(vec![2, 0]));
        let hyp = Hypothesis::new(vec![0, m, 3, m], vec![1.0, 0.0, 1.0, 0.0], &v).unwrap();
        let adjusted = adjust_masks(&hyp, &labels, &v).unwrap();
        assert_eq!(adjusted.tokens, vec![0, m, m, 3]);
        assert_eq!(length_labels(&TokenSequence(vec![0, 1, 2]), &[m], &v).unwrap().0, vec![3]);
        assert!(length_labels(&y, &[0, 1, 2, 3], &v).unwrap().0.is_empty());
        assert!(length_labels(&y, &[1, m], &v).is_err());
    }

    #[test]
    fn span_mask_is_consistent_with_labels() {
        let v = Vocab::new(40).unwrap();
        let y = TokenSequence((0..20).collect());
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = span_mask(&y, &v, 2.0, &mut rng).unwrap();
            s.expanded.validate(&v).unwrap();
            assert!(!s.expanded.hidden.is_empty());
            assert_eq!(length_labels(&y, &s.placeholders, &v).unwrap().0, s.lengths);
        }
    }

    #[test]
    fn refine_runs_exactly_k_passes() {
        let v = vocab();
        let m = v.mask();
        let hyp = Hypothesis::new(vec![m, 2, m, m], vec![0.0, 1.0, 0.0, 0.0], &v).unwrap();
        let mut calls = Vec::new();
        let mut predictor = |obs: &[usize]| {
            calls.push(obs.iter().filter(|&&t| t == m).count());
            Ok(Array2::from_shape_fn((obs.len(), 5), |(p, c)| if c == p { -0.1 * p as f64 - 0.01 } else { -5.0 }))
        };
        let (out, iters) = refine(hyp, &mut predictor, 10, &v).unwrap();
        assert_eq!(iters, 10);
        assert_eq!(out.tokens, vec![0, 2, 2, 3]);
        assert_eq!(calls.len(), 10);
        // floor(3 * (10 - i) / 10) masks remain after pass i.
        assert_eq!(calls, [3, 2, 2, 2, 1, 1, 1, 0, 0, 0]);
    }
}
