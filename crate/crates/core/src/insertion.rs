//! Balanced-binary-tree insertion order, slot-parallel insertion decoding and
//! the joint insertion + CTC objective of the single-stack model.

use ndarray::Array2;

use crate::ctc::{argmax_lowest, best_path_decode, ctc_loss, PosteriorGrid, TokenSequence};
use crate::error::{Error, Result};

/// Insertions grouped by round. Slot indices refer to the hypothesis as it
/// stood before the round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionSchedule {
    pub rounds: Vec<Vec<(usize, usize)>>,
    /// Target positions inserted by each round, ascending.
    pub positions: Vec<Vec<usize>>,
}

impl InsertionSchedule {
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }
}

/// Each round inserts the midpoint `floor((lo + hi) / 2)` of every interval
/// not yet covered.
pub fn bbt_schedule(target: &[usize]) -> InsertionSchedule {
    let mut intervals: Vec<(usize, usize)> = if target.is_empty() {
        Vec::new()
    } else {
        vec![(0, target.len() - 1)]
    };
    let mut inserted = vec![false; target.len()];
    let mut rounds = Vec::new();
    let mut positions = Vec::new();
    while !intervals.is_empty() {
        let mut next = Vec::new();
        let mut round = Vec::new();
        let mut pos = Vec::new();
        for &(lo, hi) in &intervals {
            let mid = (lo + hi) / 2;
            let slot = inserted[..mid].iter().filter(|&&b| b).count();
            round.push((slot, target[mid]));
            pos.push(mid);
            if mid > lo {
                next.push((lo, mid - 1));
            }
            if mid < hi {
                next.push((mid + 1, hi));
            }
        }
        for &p in &pos {
            inserted[p] = true;
        }
        rounds.push(round);
        positions.push(pos);
        intervals = next;
    }
    InsertionSchedule { rounds, positions }
}

/// Inserts one round of `(slot, token)` pairs into `hyp` in parallel.
pub fn apply_round(hyp: &[usize], round: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut by_slot: Vec<Option<usize>> = vec![None; hyp.len() + 1];
    for &(slot, tok) in round {
        if slot > hyp.len() {
            return Err(Error::invalid(format!("slot {slot} beyond hypothesis of {}", hyp.len())));
        }
        if by_slot[slot].replace(tok).is_some() {
            return Err(Error::invalid(format!("two insertions into slot {slot}")));
        }
    }
    let mut out = Vec::with_capacity(hyp.len() + round.len());
    for (slot, ins) in by_slot.iter().enumerate() {
        if let Some(tok) = ins {
            out.push(*tok);
        }
        if slot < hyp.len() {
            out.push(hyp[slot]);
        }
    }
    Ok(out)
}

/// Rebuilds the target by applying every round to an empty hypothesis.
pub fn replay(schedule: &InsertionSchedule) -> Result<Vec<usize>> {
    schedule
        .rounds
        .iter()
        .try_fold(Vec::new(), |hyp, round| apply_round(&hyp, round))
}

/// What one slot should emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotTarget {
    Insert(usize),
    End,
}

/// The partial hypothesis after `depth` rounds and the label of each of its
/// slots for the next round.
pub fn slot_targets(target: &[usize], depth: usize) -> Result<(Vec<usize>, Vec<SlotTarget>)> {
    let schedule = bbt_schedule(target);
    if depth > schedule.round_count() {
        return Err(Error::invalid(format!(
            "depth {depth} exceeds {} rounds",
            schedule.round_count()
        )));
    }
    let mut done: Vec<usize> = schedule.positions[..depth].iter().flatten().copied().collect();
    done.sort_unstable();
    let hyp: Vec<usize> = done.iter().map(|&p| target[p]).collect();
    let mut labels = vec![SlotTarget::End; hyp.len() + 1];
    if let Some(round) = schedule.rounds.get(depth) {
        for &(slot, tok) in round {
            labels[slot] = SlotTarget::Insert(tok);
        }
    }
    Ok((hyp, labels))
}

/// Slot NLL: the required token at slots that receive an insertion and the
/// end-of-slot class (`end_class`) everywhere else.
pub fn insertion_loss(
    slot_log_probs: &Array2<f64>,
    targets: &[SlotTarget],
    end_class: usize,
) -> Result<(f64, Array2<f64>)> {
    if slot_log_probs.nrows() != targets.len() {
        return Err(Error::shape(format!(
            "{} slot outputs for {} slots",
            slot_log_probs.nrows(),
            targets.len()
        )));
    }
    if end_class >= slot_log_probs.ncols() {
        return Err(Error::shape("end-of-slot class outside slot outputs"));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(slot_log_probs.raw_dim());
    for (s, t) in targets.iter().enumerate() {
        let c = match *t {
            SlotTarget::Insert(tok) if tok < end_class => tok,
            SlotTarget::Insert(tok) => {
                return Err(Error::invalid(format!("slot target {tok} is not a token")));
            }
            SlotTarget::End => end_class,
        };
        loss -= slot_log_probs[[s, c]];
        grad[[s, c]] -= 1.0;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertionOutcome {
    pub tokens: TokenSequence,
    /// Model calls, including the final all-end round.
    pub rounds: usize,
}

/// Slot log-probabilities (`(len+1) x (V+1)`, last class end-of-slot) for a
/// hypothesis.
pub type SlotModel<'a> = dyn FnMut(&[usize]) -> Result<Array2<f64>> + 'a;

fn argmax_insertions(slots: &Array2<f64>, hyp_len: usize) -> Result<Vec<(usize, usize)>> {
    if slots.nrows() != hyp_len + 1 {
        return Err(Error::shape(format!("{} slots for hypothesis of {hyp_len}", slots.nrows())));
    }
    let end = slots.ncols() - 1;
    Ok(slots
        .rows()
        .into_iter()
        .enumerate()
        .filter_map(|(s, row)| {
            let (c, _) = argmax_lowest(row);
            (c != end).then_some((s, c))
        })
        .collect())
}

/// Starts from the empty hypothesis and inserts every slot's argmax token in
/// parallel until all slots choose end-of-slot, `max_rounds` calls are made,
/// or a round would grow the hypothesis beyond `max_len`.
pub fn insertion_decode(model: &mut SlotModel<'_>, max_rounds: usize, max_len: usize) -> Result<InsertionOutcome> {
    let mut hyp = Vec::new();
    let mut rounds = 0;
    while rounds < max_rounds {
        let slots = model(&hyp)?;
        rounds += 1;
        let round = argmax_insertions(&slots, hyp.len())?;
        if round.is_empty() || hyp.len() + round.len() > max_len {
            break;
        }
        hyp = apply_round(&hyp, &round)?;
    }
    Ok(InsertionOutcome {
        tokens: TokenSequence(hyp),
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KermitLoss {
    pub loss: f64,
    pub slot_grad: Array2<f64>,
    pub grid_grad: Array2<f64>,
}

/// Insertion loss plus `lambda` times the CTC loss of the grid conditioned
/// on the same partial hypothesis.
pub fn kermit_loss(
    slot_log_probs: &Array2<f64>,
    targets: &[SlotTarget],
    conditioned: &PosteriorGrid,
    target: &TokenSequence,
    lambda: f64,
) -> Result<KermitLoss> {
    let end_class = slot_log_probs.ncols().saturating_sub(1);
    let (ins, slot_grad) = insertion_loss(slot_log_probs, targets, end_class)?;
    if lambda == 0.0 {
        return Ok(KermitLoss {
            loss: ins,
            slot_grad,
            grid_grad: Array2::zeros(conditioned.log_probs().raw_dim()),
        });
    }
    let ctc = ctc_loss(conditioned, target)?;
    Ok(KermitLoss {
        loss: ins + lambda * ctc.loss,
        slot_grad,
        grid_grad: ctc.grad * lambda,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KermitOutcome {
    pub tokens: TokenSequence,
    /// Insertion rounds applied before the CTC read-out.
    pub insertions: usize,
    /// Joint-model calls (insertion rounds plus the final pass).
    pub calls: usize,
}

/// One joint-model call: slot log-probabilities and the CTC grid, both
/// conditioned on the hypothesis.
pub type JointModel<'a> = dyn FnMut(&[usize]) -> Result<(Array2<f64>, PosteriorGrid)> + 'a;

/// Runs insertion rounds until the budget, an all-end round, `max_rounds`
/// or a round that would exceed `max_len` tokens, then best-path decodes the
/// conditioned CTC grid.
pub fn kermit_decode(
    model: &mut JointModel<'_>,
    budget: Option<usize>,
    max_rounds: usize,
    max_len: usize,
) -> Result<KermitOutcome> {
    let limit = budget.unwrap_or(usize::MAX).min(max_rounds);
    let mut hyp = Vec::new();
    let mut insertions = 0;
    let mut calls = 0;
    loop {
        let (slots, grid) = model(&hyp)?;
        calls += 1;
        let round = if insertions < limit {
            argmax_insertions(&slots, hyp.len())?
        } else {
            Vec::new()
        };
        if round.is_empty() || hyp.len() + round.len() > max_len {
            return Ok(KermitOutcome {
                tokens: best_path_decode(&grid).tokens,
                insertions,
                calls,
            });
        }
        hyp = apply_round(&hyp, &round)?;
        insertions += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_tokens_follow_the_tree() {
        let s = bbt_schedule(&[1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(s.positions, vec![vec![3], vec![1, 5], vec![0, 2, 4, 6]]);
        assert_eq!(replay(&s).unwrap(), vec![1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn even_lengths_take_the_left_center() {
        let s = bbt_schedule(&[10, 11, 12, 13]);
        assert_eq!(s.positions, vec![vec![1], vec![0, 2], vec![3]]);
        assert_eq!(s.rounds, vec![vec![(0, 11)], vec![(0, 10), (1, 12)], vec![(3, 13)]]);
        assert_eq!(bbt_schedule(&[5]).rounds, vec![vec![(0, 5)]]);
        assert!(bbt_schedule(&[]).rounds.is_empty());
    }

    #[test]
    fn slot_labels_by_depth() {
        let (hyp, labels) = slot_targets(&[7, 8, 9], 1).unwrap();
        assert_eq!(hyp, vec![8]);
        assert_eq!(labels, vec![SlotTarget::Insert(7), SlotTarget::Insert(9)]);
        let (hyp, labels) = slot_targets(&[7, 8, 9], 2).unwrap();
        assert_eq!(hyp, vec![7, 8, 9]);
        assert_eq!(labels, vec![SlotTarget::End; 4]);
    }

    #[test]
    fn immediate_end_gives_empty_output() {
        let mut model = |h: &[usize]| {
            let mut m = Array2::from_elem((h.len() + 1, 4), -3.0);
            m.column_mut(3).fill(-0.1);
            Ok(m)
        };
        let out = insertion_decode(&mut model, 10, 100).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.rounds, 1);
    }
}
