//! Minimal neural-network toolkit: reverse-mode graph, parameters,
//! transformer layers, Adam/Noam and gradient checking.

pub mod graph;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Graph, Mat, Var};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Grads, Init, ParamId, ParamStore};

#[cfg(test)]
mod tests {
    use super::layers::*;
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || n.sample(&mut rng))
    }

    /// Exercises every op: the loss is a fixed random projection of the
    /// outputs so all gradients are generic.
    fn composite(store: &ParamStore, blocks: &(EncoderBlock, DecoderBlock, Linear, Embedding, Linear)) -> (f64, Grads) {
        let (enc, dec, alpha_head, emb, head) = blocks;
        let mut g = Graph::new(store);
        let x = g.input(random(6, 8, 11));
        let h = enc.forward(&mut g, x);
        let tokens = emb.forward(&mut g, &[0, 2, 1, 2]);
        let y = dec.forward(&mut g, tokens, h, true);
        let a = alpha_head.forward(&mut g, h);
        let a = g.sigmoid(a);
        let scaled = g.train_scale(a, 3.0);
        let c = g.cif(scaled, h, 1.0, false);
        let first = g.slice_rows(y, 0, 3);
        let mixed = g.concat_cols(&[first, c]);
        let left = g.slice_cols(mixed, 0, 8);
        let stacked = g.concat_rows(&[left, y]);
        let logits = head.forward(&mut g, stacked);
        let sm = g.softmax(logits);
        let ls = g.log_softmax(logits);
        let prod = g.mul(sm, ls);
        let out = g.scale(prod, 0.5);
        let weights = random(7, 5, 99);
        let loss = (g.value(out) * &weights).sum();
        (loss, g.backward(&[(out, weights)]))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new(5);
        let parts = (
            EncoderBlock::new(&mut store, "enc", 8, 16, 2),
            DecoderBlock::new(&mut store, "dec", 8, 16, 2),
            Linear::new(&mut store, "alpha", 8, 1),
            Embedding::new(&mut store, "emb", 3, 8),
            Linear::new(&mut store, "head", 8, 5),
        );
        let report = grad_check(&mut store, |s| Ok(composite(s, &parts)), 1e-5, 300, 1).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
