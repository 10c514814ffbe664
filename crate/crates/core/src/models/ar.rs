//! Greedy token-by-token decoding for the autoregressive baseline.

use ndarray::Array1;

use crate::ctc::{argmax_lowest, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub tokens: TokenSequence,
    /// Decoder steps, counting the one that produced the end token.
    pub iterations: usize,
}

/// Appends the argmax of `step(prefix)` until it returns `end` or `max_len`
/// tokens have been emitted. `step` returns log-probabilities over tokens
/// plus the end class.
pub fn ar_greedy_decode<F>(mut step: F, max_len: usize, end: usize) -> Result<GreedyOutcome>
where
    F: FnMut(&[usize]) -> Result<Array1<f64>>,
{
    let mut tokens = Vec::new();
    let mut iterations = 0;
    loop {
        if tokens.len() >= max_len {
            break;
        }
        let scores = step(&tokens)?;
        if scores.len() <= end {
            return Err(Error::shape(format!("step returned {} classes, end is {end}", scores.len())));
        }
        iterations += 1;
        let (best, _) = argmax_lowest(scores.view());
        if best == end {
            break;
        }
        tokens.push(best);
    }
    Ok(GreedyOutcome {
        tokens: TokenSequence(tokens),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn immediate_end() {
        let out = ar_greedy_decode(|_| Ok(array![-2.0, -1.0, -0.1]), 10, 2).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn counts_the_end_step() {
        let script = [0, 1, 1, 0, 2];
        let out = ar_greedy_decode(
            |prefix| {
                let mut s = array![-5.0, -5.0, -5.0];
                s[script[prefix.len()]] = -0.01;
                Ok(s)
            },
            10,
            2,
        )
        .unwrap();
        assert_eq!(out.tokens.0, vec![0, 1, 1, 0]);
        assert_eq!(out.iterations, out.tokens.len() + 1);
    }
}
