use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nar_core::align_denoise::{corrupt_alignment, NoiseSpec};
use nar_core::cif::{cif_integrate, train_scale};
use nar_core::ctc::{collapse, ctc_loss, enumerate_paths, log_sum_exp, Alignment, PosteriorGrid, TokenSequence, Vocab};
use nar_core::eval::{corpus_eval, edit_alignment};
use nar_core::insertion::{bbt_schedule, replay};
use nar_core::masked::{adjust_masks, length_labels, merge_mask_runs, random_mask, refine, Hypothesis, MaskCount};
use nar_core::models::config::TailHandling;

fn grid_from(values: &[f64], frames: usize, classes: usize) -> PosteriorGrid {
    PosteriorGrid::from_logits(&Array2::from_shape_vec((frames, classes), values.to_vec()).unwrap())
}

/// Plain recursive Levenshtein distance.
fn naive_distance(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = naive_distance(ra, rb) + usize::from(x != y);
            diag.min(naive_distance(ra, b) + 1).min(naive_distance(a, rb) + 1)
        }
    }
}

fn ctc_case() -> impl Strategy<Value = (usize, usize, Vec<usize>, Vec<f64>)> {
    (1usize..=6, 1usize..=3).prop_flat_map(|(t, v)| {
        (
            Just(t),
            Just(v),
            proptest::collection::vec(0..v, 0..=t),
            proptest::collection::vec(-3.0f64..3.0, t * (v + 1)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ctc_loss_is_the_path_sum((t, v, target, logits) in ctc_case()) {
        let grid = grid_from(&logits, t, v + 1);
        let y = TokenSequence(target);
        let paths = enumerate_paths(&y, t, v);
        match ctc_loss(&grid, &y) {
            Ok(l) => {
                let lp = grid.log_probs();
                let total = log_sum_exp(paths.iter().map(|p| p.iter().enumerate().map(|(f, &c)| lp[[f, c]]).sum::<f64>()));
                prop_assert!((l.loss + total).abs() < 1e-10);
            }
            Err(_) => prop_assert!(paths.is_empty()),
        }
    }

    #[test]
    fn every_enumerated_path_collapses_to_the_target((t, v, target, _l) in ctc_case()) {
        let vocab = Vocab::new(v).unwrap();
        let y = TokenSequence(target);
        for p in enumerate_paths(&y, t, v) {
            prop_assert_eq!(p.len(), t);
            prop_assert_eq!(&collapse(&p, &vocab).unwrap(), &y);
        }
    }

    #[test]
    fn corruption_keeps_length(frames in proptest::collection::vec(0usize..6, 0..40), seed: u64,
                               sub in 0.0f64..0.4, del in 0.0f64..0.3, ins in 0.0f64..0.3) {
        let spec = NoiseSpec { sub_rate: sub, del_rate: del, ins_rate: ins, seed };
        let out = corrupt_alignment(&Alignment(frames.clone()), &spec, &Vocab::new(5).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), frames.len());
        prop_assert!(out.iter().all(|&z| z < 6));
    }

    #[test]
    fn integrate_and_fire_conserves_weight(alphas in proptest::collection::vec(0.0f64..1.2, 1..30), emit in any::<bool>()) {
        let states = Array2::from_shape_fn((alphas.len(), 3), |(t, c)| (t * 3 + c) as f64 * 0.1);
        let tail = if emit { TailHandling::EmitPartial } else { TailHandling::Discard };
        let out = cif_integrate(&alphas, states.view(), 1.0, tail).unwrap();
        let total: f64 = alphas.iter().sum();
        let used: f64 = out.weights.sum();
        prop_assert!(used <= total + 1e-9);
        // Every frame hands out exactly its weight unless it feeds a dropped tail.
        let fired = out.weights.sum_axis(ndarray::Axis(0));
        for (t, &a) in alphas.iter().enumerate() {
            prop_assert!(fired[t] <= a + 1e-9);
        }
        prop_assert!(total - used < 1.0 + 1e-9);
        let slack = if emit { 0.5 } else { 0.0 };
        prop_assert!(out.len() as f64 <= total + slack + 1e-9);
    }

    #[test]
    fn rescaled_weights_sum_to_target(alphas in proptest::collection::vec(0.01f64..1.0, 1..30), len in 1usize..20) {
        let s = train_scale(&alphas, len).unwrap();
        prop_assert!((s.iter().sum::<f64>() - len as f64).abs() < 1e-9);
        let states = Array2::<f64>::zeros((alphas.len(), 2));
        let out = cif_integrate(&s, states.view(), 1.0, TailHandling::EmitPartial).unwrap();
        prop_assert!(out.len() == len || out.len() + 1 == len || out.len() == len + 1);
    }

    #[test]
    fn edit_counts_match_naive_distance(a in proptest::collection::vec(0usize..3, 0..=8), b in proptest::collection::vec(0usize..3, 0..=8)) {
        let e = edit_alignment(&a, &b);
        prop_assert_eq!(e.total(), naive_distance(&a, &b));
        prop_assert_eq!(a.len() as isize - b.len() as isize, e.del as isize - e.ins as isize);
    }

    #[test]
    fn corpus_eval_is_order_free(pairs in proptest::collection::vec((proptest::collection::vec(0usize..4, 1..12), proptest::collection::vec(0usize..4, 0..12)), 1..20), rot in 0usize..20) {
        let a = corpus_eval("m", &pairs, 5).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let b = corpus_eval("m", &shuffled, 5).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.overall.wer, a.overall.sub + a.overall.del + a.overall.ins);
        let buckets: usize = a.buckets.iter().map(|b| b.errors.counts.total()).sum();
        prop_assert_eq!(buckets, a.overall.counts.total());
        prop_assert!(a.buckets.iter().all(|b| b.errors.utterances > 0));
    }

    #[test]
    fn masked_runs_recover_their_lengths(target in proptest::collection::vec(0usize..5, 1..16), seed: u64) {
        let vocab = Vocab::new(5).unwrap();
        let y = TokenSequence(target);
        let pair = random_mask(&y, &vocab, MaskCount::Uniform, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let conf = pair.observed.iter().map(|&t| if t == vocab.mask() { 0.0 } else { 1.0 }).collect();
        let hyp = Hypothesis::new(pair.observed.clone(), conf, &vocab).unwrap();
        let merged = merge_mask_runs(&hyp, &vocab);
        let labels = length_labels(&y, &merged.tokens, &vocab).unwrap();
        let adjusted = adjust_masks(&merged, &labels, &vocab).unwrap();
        prop_assert_eq!(adjusted.tokens.len(), y.len());
        prop_assert_eq!(adjusted.mask_count(&vocab), pair.hidden.len());
    }

    #[test]
    fn refinement_makes_exactly_k_passes(len in 1usize..20, masked in 0usize..20, k in 1usize..12, seed: u64) {
        let vocab = Vocab::new(5).unwrap();
        let masked = masked.min(len);
        let mut tokens = vec![1; len];
        tokens.iter_mut().take(masked).for_each(|t| *t = vocab.mask());
        let conf = tokens.iter().map(|&t| if t == vocab.mask() { 0.0 } else { 0.5 }).collect();
        let hyp = Hypothesis::new(tokens, conf, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut calls = 0;
        let mut predictor = |obs: &[usize]| {
            calls += 1;
            Ok(Array2::from_shape_fn((obs.len(), 5), |_| rand::Rng::random::<f64>(&mut rng).ln()))
        };
        let (out, passes) = refine(hyp, &mut predictor, k, &vocab).unwrap();
        prop_assert_eq!(passes, if masked == 0 { 0 } else { k });
        prop_assert_eq!(calls, passes);
        prop_assert_eq!(out.mask_count(&vocab), 0);
    }
}

#[test]
fn tree_order_round_trips_for_short_targets() {
    for len in 0..64usize {
        let target: Vec<usize> = (0..len).map(|i| i * 7 % 11).collect();
        let schedule = bbt_schedule(&target);
        assert_eq!(replay(&schedule).unwrap(), target, "L={len}");
        let rounds = ((len + 1) as f64).log2().ceil() as usize;
        assert_eq!(schedule.round_count(), rounds, "L={len}");
    }
}
