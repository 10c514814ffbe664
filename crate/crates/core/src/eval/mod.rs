//! Word-error-rate scoring with substitution / deletion / insertion
//! attribution, length-bucketed breakdowns and decode benchmarking.

pub mod bench;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bench::{bench_decode, BenchHooks, BenchPhase, BenchReport, MethodBench};
pub use report::{emit_bench_report, emit_eval_report, read_eval_csv};

pub const DEFAULT_BUCKET_WIDTH: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }

    fn add(&mut self, other: EditCounts) {
        self.sub += other.sub;
        self.del += other.del;
        self.ins += other.ins;
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one
/// with the most substitutions wins, which fixes the del/ins split too.
pub fn edit_alignment(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, substitutions, deletions, insertions) per cell, row by row.
    type Cell = (usize, usize, usize, usize);
    let better = |a: Cell, b: Cell| if (a.0, std::cmp::Reverse(a.1)) <= (b.0, std::cmp::Reverse(b.1)) { a } else { b };
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i, 0);
        for j in 1..=m {
            let d = prev[j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                d
            } else {
                (d.0 + 1, d.1 + 1, d.2, d.3)
            };
            let up = prev[j];
            let left = cur[j - 1];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            cur[j] = better(better(diag, del), ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, sub, del, ins) = prev[m];
    EditCounts { sub, del, ins }
}

/// Error counts and rates of a group of utterances. Rates are normalised by
/// reference tokens and `wer` is defined as their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub counts: EditCounts,
    pub wer: f64,
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
}

impl ErrorBreakdown {
    fn new(utterances: usize, ref_tokens: usize, counts: EditCounts) -> Self {
        let rate = |c: usize| if ref_tokens == 0 { 0.0 } else { c as f64 / ref_tokens as f64 };
        let (sub, del, ins) = (rate(counts.sub), rate(counts.del), rate(counts.ins));
        ErrorBreakdown {
            utterances,
            ref_tokens,
            counts,
            wer: sub + del + ins,
            sub,
            del,
            ins,
        }
    }
}

/// Utterances whose reference length falls in `lo..=hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    #[serde(flatten)]
    pub errors: ErrorBreakdown,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(flatten)]
    pub overall: ErrorBreakdown,
    pub bucket_width: usize,
    /// Non-empty buckets in ascending length order.
    pub buckets: Vec<LengthBucket>,
}

/// Scores `(reference, hypothesis)` pairs. Buckets with no utterances are
/// left out.
pub fn corpus_eval<R, H>(method: &str, pairs: &[(R, H)], bucket_width: usize) -> Result<EvalReport>
where
    R: AsRef<[usize]>,
    H: AsRef<[usize]>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if bucket_width == 0 {
        return Err(Error::invalid("bucket width must be positive"));
    }
    let mut total = EditCounts::default();
    let mut ref_tokens = 0;
    let mut buckets: std::collections::BTreeMap<usize, (usize, usize, EditCounts)> = Default::default();
    for (r, h) in pairs {
        let (r, h) = (r.as_ref(), h.as_ref());
        let e = edit_alignment(r, h);
        total.add(e);
        ref_tokens += r.len();
        let b = buckets.entry(r.len() / bucket_width).or_default();
        b.0 += 1;
        b.1 += r.len();
        b.2.add(e);
    }
    if ref_tokens == 0 {
        return Err(Error::invalid("references contain no tokens"));
    }
    Ok(EvalReport {
        method: method.to_string(),
        overall: ErrorBreakdown::new(pairs.len(), ref_tokens, total),
        bucket_width,
        buckets: buckets
            .into_iter()
            .map(|(k, (n, toks, e))| LengthBucket {
                lo: k * bucket_width,
                hi: k * bucket_width + bucket_width - 1,
                errors: ErrorBreakdown::new(n, toks, e),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edits() {
        assert_eq!(edit_alignment(&[1, 2, 3], &[1, 9, 3]), EditCounts { sub: 1, del: 0, ins: 0 });
        assert_eq!(edit_alignment(&[1, 2], &[1]), EditCounts { sub: 0, del: 1, ins: 0 });
        assert_eq!(edit_alignment(&[1], &[1, 2]), EditCounts { sub: 0, del: 0, ins: 1 });
        assert_eq!(edit_alignment(&[], &[]), EditCounts::default());
    }

    #[test]
    fn ties_prefer_substitution() {
        // Two substitutions or delete-1 / insert-3 both cost 2.
        assert_eq!(edit_alignment(&[1, 2], &[2, 3]), EditCounts { sub: 2, del: 0, ins: 0 });
    }

    #[test]
    fn perfect_and_one_percent() {
        let refs: Vec<Vec<usize>> = (0..10).map(|i| (0..10).map(|j| (i + j) % 7).collect()).collect();
        let r = corpus_eval("x", &refs.iter().map(|r| (r.clone(), r.clone())).collect::<Vec<_>>(), 5).unwrap();
        assert_eq!((r.overall.wer, r.overall.sub, r.overall.del, r.overall.ins), (0.0, 0.0, 0.0, 0.0));
        let mut hyps = refs.clone();
        hyps[3][4] = 99;
        let pairs: Vec<_> = refs.into_iter().zip(hyps).collect();
        let r = corpus_eval("x", &pairs, 5).unwrap();
        assert_eq!(r.overall.wer, 0.01);
        assert_eq!(r.buckets.len(), 1);
        assert_eq!(r.buckets[0].label(), "10-14");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(corpus_eval::<Vec<usize>, Vec<usize>>("x", &[], 5).is_err());
        assert!(corpus_eval("x", &[(vec![], vec![1])], 5).is_err());
    }
}
