//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Losses computed
//! outside the graph (CTC, masked NLL, quantity loss) hand their gradients
//! back as seeds on the nodes they read, and [`Graph::backward`] returns the
//! accumulated parameter gradients.

use std::borrow::Cow;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
pub(crate) const FIRE_EPS: f64 = 1e-9;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        mask: Mat,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    TrainScale {
        alphas: Var,
        target: f64,
    },
    Cif {
        alphas: Var,
        states: Var,
        weights: Mat,
        cumsum: Vec<f64>,
        threshold: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    needs_grad: bool,
}

/// Dropout configuration for a training-mode graph.
struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutState>,
}

impl<'p> Graph<'p> {
    /// Inference-mode graph: dropout disabled.
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Training-mode graph with inverted dropout at `rate`.
    pub fn training(store: &'p ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        if rate > 0.0 {
            g.dropout = Some(DropoutState { rate, rng });
        }
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        softmax_rows_inplace(&mut out);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = crate::ctc::log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros((ids.len(), tv.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Inverted dropout; identity in inference mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(state) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - state.rate;
        let shape = self.nodes[x.0].value.raw_dim();
        let mask = Mat::from_shape_simple_fn(shape, || {
            if state.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Multi-head scaled dot-product attention of `q` (n x d) over `k`, `v`
    /// (m x d). With `causal`, query `i` only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        let m = kv.nrows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            if causal {
                for i in 0..n {
                    for j in (i + 1)..m {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Rescales a `T x 1` weight column so that it sums to `target`.
    pub fn train_scale(&mut self, alphas: Var, target: f64) -> Var {
        let av = self.value(alphas);
        let total = av.sum();
        let out = av * (target / total);
        let ng = self.ng(alphas);
        self.push(out, Op::TrainScale { alphas, target }, ng)
    }

    /// Integrate-and-fire over `states` (T x d) with per-frame weights
    /// `alphas` (T x 1). Returns one row per firing.
    pub fn cif(&mut self, alphas: Var, states: Var, threshold: f64, emit_tail: bool) -> Var {
        let av = self.value(alphas).column(0).to_vec();
        let (weights, cumsum) = cif_weights(&av, threshold, emit_tail);
        let out = weights.dot(self.value(states));
        let ng = self.ng(alphas) || self.ng(states);
        self.push(
            out,
            Op::Cif {
                alphas,
                states,
                weights,
                cumsum,
                threshold,
            },
            ng,
        )
    }

    /// Propagates the seed gradients back through the recorded graph.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.view());
        }
        let mut out = Grads::empty(self.store);
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(&node.op, &node.value, grad, &mut grads, &mut out);
        }
        out
    }

    fn backward_op(
        &self,
        op: &Op,
        value: &Mat,
        grad: Mat,
        grads: &mut [Option<Mat>],
        out: &mut Grads,
    ) {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, grad),
            Op::MatMul(a, b) => {
                if ng(a) {
                    accumulate(&mut grads[a.0], grad.dot(&self.value(*b).t()).view());
                }
                if ng(b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(&grad).view());
                }
            }
            Op::MatMulBt(a, b) => {
                if ng(a) {
                    accumulate(&mut grads[a.0], grad.dot(self.value(*b)).view());
                }
                if ng(b) {
                    accumulate(&mut grads[b.0], grad.t().dot(self.value(*a)).view());
                }
            }
            Op::Add(a, b) => {
                if ng(a) {
                    accumulate(&mut grads[a.0], grad.view());
                }
                if ng(b) {
                    accumulate(&mut grads[b.0], grad.view());
                }
            }
            Op::AddRow(a, row) => {
                if ng(row) {
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], summed.view());
                }
                if ng(a) {
                    accumulate_owned(&mut grads[a.0], grad);
                }
            }
            Op::Mul(a, b) => {
                if ng(a) {
                    accumulate(&mut grads[a.0], (&grad * self.value(*b)).view());
                }
                if ng(b) {
                    accumulate(&mut grads[b.0], (&grad * self.value(*a)).view());
                }
            }
            Op::Scale(a, f) => accumulate_owned(&mut grads[a.0], grad * *f),
            Op::Relu(a) => {
                let mut g = grad;
                Zip::from(&mut g).and(value).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
                accumulate_owned(&mut grads[a.0], g);
            }
            Op::Sigmoid(a) => {
                let mut g = grad;
                Zip::from(&mut g).and(value).for_each(|g, &y| *g *= y * (1.0 - y));
                accumulate_owned(&mut grads[a.0], g);
            }
            Op::Softmax(a) => {
                let mut g = grad;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(value.rows()) {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|g, &y| *g = y * (*g - dot));
                }
                accumulate_owned(&mut grads[a.0], g);
            }
            Op::LogSoftmax(a) => {
                let mut g = grad;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(value.rows()) {
                    let total = grow.sum();
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|g, &y| *g -= y.exp() * total);
                }
                accumulate_owned(&mut grads[a.0], g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if ng(beta) {
                    let gb = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[beta.0], gb.view());
                }
                if ng(gamma) {
                    let gg = (&grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[gamma.0], gg.view());
                }
                if ng(x) {
                    let mut dxhat = grad * self.value(*gamma);
                    let d = dxhat.ncols() as f64;
                    for ((mut row, xh), &inv) in
                        dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let sum: f64 = row.sum();
                        let dot: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row).and(&xh).for_each(|g, &xh| {
                            *g = inv / d * (d * *g - sum - xh * dot);
                        });
                    }
                    accumulate_owned(&mut grads[x.0], dxhat);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let slot = grads[table.0].get_or_insert_with(|| Mat::zeros(tv.raw_dim()));
                for (row, &id) in grad.rows().into_iter().zip(ids) {
                    let mut dst = slot.row_mut(id);
                    dst += &row;
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.value(*x).raw_dim();
                let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(shape));
                let mut dst = slot.slice_mut(s![*start..*start + grad.nrows(), ..]);
                dst += &grad;
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).raw_dim();
                let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(shape));
                let mut dst = slot.slice_mut(s![.., *start..*start + grad.ncols()]);
                dst += &grad;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if ng(p) {
                        accumulate(&mut grads[p.0], grad.slice(s![offset..offset + rows, ..]));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).ncols();
                    if ng(p) {
                        accumulate(&mut grads[p.0], grad.slice(s![.., offset..offset + cols]));
                    }
                    offset += cols;
                }
            }
            Op::Dropout { x, mask } => accumulate_owned(&mut grads[x.0], grad * mask),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.raw_dim());
                let mut dk = Mat::zeros(kv.raw_dim());
                let mut dv = Mat::zeros(vv.raw_dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = grad.slice(cols);
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut dp = go.dot(&vv.slice(cols).t());
                    for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|g, &p| *g = p * (*g - dot) * scale);
                    }
                    dq.slice_mut(cols).assign(&dp.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&dp.t().dot(&qv.slice(cols)));
                }
                if ng(q) {
                    accumulate_owned(&mut grads[q.0], dq);
                }
                if ng(k) {
                    accumulate_owned(&mut grads[k.0], dk);
                }
                if ng(v) {
                    accumulate_owned(&mut grads[v.0], dv);
                }
            }
            Op::TrainScale { alphas, target } => {
                let av = self.value(*alphas);
                let total = av.sum();
                let dot: f64 = (&grad * av).sum();
                let g = grad.mapv(|g| g * target / total - target * dot / (total * total));
                accumulate_owned(&mut grads[alphas.0], g);
            }
            Op::Cif {
                alphas,
                states,
                weights,
                cumsum,
                threshold,
            } => {
                let hv = self.value(*states);
                if ng(states) {
                    accumulate_owned(&mut grads[states.0], weights.t().dot(&grad));
                }
                if ng(alphas) {
                    let dw = grad.dot(&hv.t());
                    let dalpha = cif_alpha_grad(weights, &dw, cumsum, *threshold);
                    accumulate_owned(&mut grads[alphas.0], dalpha.insert_axis(Axis(1)));
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: ArrayView2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn accumulate_owned(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

pub(crate) fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
}

/// Integration weights of the integrate-and-fire scan: row `i` holds how
/// much of each frame went into embedding `i`. Also returns the running
/// sums used by the backward pass.
///
/// Frames are consumed left to right; when the accumulated weight reaches
/// `threshold` the crossing frame is split, its remainder opening the next
/// embedding. A trailing partial embedding is kept only with `emit_tail`
/// and when it holds at least half the threshold.
pub fn cif_weights(alphas: &[f64], threshold: f64, emit_tail: bool) -> (Mat, Vec<f64>) {
    let frames = alphas.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut current = vec![0.0; frames];
    let mut acc = 0.0;
    let mut cumsum = Vec::with_capacity(frames);
    let mut running = 0.0;
    for (t, &a) in alphas.iter().enumerate() {
        running += a;
        cumsum.push(running);
        let mut left = a;
        while acc + left >= threshold - FIRE_EPS {
            let take = (threshold - acc).max(0.0).min(left);
            current[t] += take;
            left -= take;
            rows.push(std::mem::replace(&mut current, vec![0.0; frames]));
            acc = 0.0;
            if left <= FIRE_EPS {
                left = left.max(0.0);
                break;
            }
        }
        current[t] += left;
        acc += left;
    }
    if emit_tail && acc >= 0.5 * threshold {
        rows.push(current);
    }
    let mut weights = Mat::zeros((rows.len(), frames));
    for (i, row) in rows.into_iter().enumerate() {
        weights.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    (weights, cumsum)
}

/// Gradient of the loss w.r.t. the frame weights given the gradient w.r.t.
/// the integration weights. Uses the interval-overlap form
/// `w[i][t] = max(0, min(S_t, (i+1)b) - max(S_{t-1}, i b))`.
fn cif_alpha_grad(weights: &Mat, dw: &Mat, cumsum: &[f64], threshold: f64) -> Array1<f64> {
    let frames = cumsum.len();
    let mut dsum = vec![0.0; frames];
    for i in 0..weights.nrows() {
        let lo = i as f64 * threshold;
        let hi = (i + 1) as f64 * threshold;
        for t in 0..frames {
            if weights[[i, t]] <= 0.0 {
                continue;
            }
            let g = dw[[i, t]];
            if cumsum[t] < hi {
                dsum[t] += g;
            }
            if t > 0 && cumsum[t - 1] > lo {
                dsum[t - 1] -= g;
            }
        }
    }
    let mut dalpha = Array1::zeros(frames);
    let mut acc = 0.0;
    for t in (0..frames).rev() {
        acc += dsum[t];
        dalpha[t] = acc;
    }
    dalpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use ndarray::array;

    #[test]
    fn cif_splitting_rule() {
        let (w, _) = cif_weights(&[0.6, 0.6, 0.8], 1.0, false);
        assert_eq!(w.nrows(), 2);
        let expect = array![[0.6, 0.4, 0.0], [0.0, 0.2, 0.8]];
        assert!((&w - &expect).iter().all(|d| d.abs() < 1e-12));
        let (w, _) = cif_weights(&[1.0, 1.0], 1.0, false);
        assert_eq!(w, array![[1.0, 0.0], [0.0, 1.0]]);
        let (w, _) = cif_weights(&[0.0, 0.0, 0.0], 1.0, false);
        assert_eq!(w.nrows(), 0);
    }

    #[test]
    fn cif_tail_flag() {
        let (w, _) = cif_weights(&[0.7, 0.9], 1.0, false);
        assert_eq!(w.nrows(), 1);
        let (w, _) = cif_weights(&[0.7, 0.9], 1.0, true);
        assert_eq!(w.nrows(), 2);
        assert!((w.row(1).sum() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", 2, 2, Init::Normal(1.0));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
    }

    #[test]
    fn matmul_gradient_matches_hand_computation() {
        let mut store = ParamStore::new(3);
        let id = store.add("w", 2, 1, Init::Zeros);
        store.value_mut(id).assign(&array![[2.0], [-1.0]]);
        let mut g = Graph::new(&store);
        let x = g.input(array![[1.0, 3.0], [0.5, 0.5]]);
        let w = g.param(id);
        let y = g.matmul(x, w);
        let grads = g.backward(&[(y, array![[1.0], [1.0]])]);
        assert_eq!(grads.get(id).unwrap(), &array![[1.5], [3.5]]);
    }
}
