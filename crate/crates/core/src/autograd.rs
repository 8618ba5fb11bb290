//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records one forward computation. Parameters enter as copies
//! of their current values; [`Graph::backward`] returns gradients keyed by
//! [`ParamId`]. Nodes that do not depend on any parameter are never
//! differentiated, so constant inputs (raw patches, positional tables,
//! teacher features) cost nothing in the backward pass.
//!
//! The op set is small and specialised for the transformer in [`crate::model`];
//! attention is a single fused op with an optional key subset, which is how
//! attention blocking is expressed.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, View, ViewMut};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Gather { x: Var, idx: Vec<usize> },
    Scatter { parts: Vec<(Var, Vec<usize>)> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, keys: Option<Vec<usize>>, probs: Vec<Mat> },
    MeanRows { x: Var, idx: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Dot(Var, Var),
    MaskedPatchMse { pred: Var, target: Mat, idx: Vec<usize> },
    WeightedSum(Vec<(Var, f64)>),
    BceWithLogits { logit: Var, target: f64 },
    SquaredError { pred: Var, target: f64 },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A trainable parameter. Repeated requests for the same id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// A parameter treated as a constant (frozen weights, teacher weights).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// `x * w + b`, with `w` shaped `in x out` and `b` shaped `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: input width {} vs weight rows {}", xv.cols, wv.rows);
        let mut out = Mat::zeros(xv.rows, wv.cols);
        gemm(1.0, View::of(xv), View::of(wv), 0.0, ViewMut::of(&mut out));
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.cols, out.cols);
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert!(out.same_shape(self.value(b)), "add: shape mismatch");
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Rows `idx` of `x`; indices may repeat (broadcasting a row).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let out = self.value(x).gather_rows(&idx);
        let needs = self.needs(x);
        self.push(out, Op::Gather { x, idx }, needs)
    }

    /// A `rows x cols` matrix of zeros with the rows of each part placed at
    /// the given target rows. Targets must not overlap.
    pub fn scatter_rows(&mut self, rows: usize, cols: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        let mut out = Mat::zeros(rows, cols);
        let mut needs = false;
        for (v, targets) in &parts {
            let pv = self.value(*v);
            assert_eq!(pv.rows, targets.len(), "scatter: part rows vs targets");
            assert_eq!(pv.cols, cols, "scatter: width mismatch");
            for (r, &t) in targets.iter().enumerate() {
                out.row_mut(t).copy_from_slice(pv.row(r));
            }
            needs |= self.needs(*v);
        }
        self.push(out, Op::Scatter { parts }, needs)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = 0.5 * *v * (1.0 + math::erf(*v * core::f64::consts::FRAC_1_SQRT_2)));
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Inverted dropout with a precomputed keep mask (entries are `0` or
    /// `1 / (1 - rate)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.len(), mask.len());
        out.data.iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Lq x d`, `k` and `v` are `Lk x d`. When `keys` is given, only
    /// those key rows take part: every other key receives exactly zero
    /// probability, which is the same as a `-inf` logit. Every query row gets
    /// an output, so callers that need "excluded" rows still get a defined
    /// value.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, keys: Option<Vec<usize>>) -> Var {
        let (qv, kv_full, vv_full) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        assert_eq!(kv_full.rows, vv_full.rows);
        assert_eq!(kv_full.cols, d);
        let (kv, vv) = match &keys {
            Some(idx) => (kv_full.gather_rows(idx), vv_full.gather_rows(idx)),
            None => (kv_full.clone(), vv_full.clone()),
        };
        assert!(kv.rows > 0, "attention needs at least one key");
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut out = Mat::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Mat::zeros(qv.rows, kv.rows);
            gemm(scale, View::cols(qv, h * hd, hd), View::cols(&kv, h * hd, hd).t(), 0.0, ViewMut::of(&mut s));
            for r in 0..s.rows {
                softmax_in_place(s.row_mut(r));
            }
            gemm(1.0, View::of(&s), View::cols(&vv, h * hd, hd), 0.0, ViewMut::cols(&mut out, h * hd, hd));
            probs.push(s);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, keys, probs }, needs)
    }

    /// Attention probabilities of an attention node, one `Lq x Lk'` matrix
    /// per head, together with the key rows they refer to (`None` = all).
    pub fn attention_probs(&self, v: Var) -> Option<(&[Mat], Option<&[usize]>)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, keys, .. } => Some((probs, keys.as_deref())),
            _ => None,
        }
    }

    /// Mean of rows `idx`, as a `1 x cols` row.
    pub fn mean_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        assert!(!idx.is_empty(), "mean over no rows");
        let xv = self.value(x);
        let mut out = Mat::zeros(1, xv.cols);
        for &i in &idx {
            for (o, v) in out.data.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.scale(1.0 / idx.len() as f64);
        let needs = self.needs(x);
        self.push(out, Op::MeanRows { x, idx }, needs)
    }

    /// Divides each row by its Euclidean norm. Zero rows are the caller's
    /// responsibility (check before calling).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = math::sqrt(row.iter().map(|v| v * v).sum());
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let needs = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, needs)
    }

    /// Sum of elementwise products, as a `1 x 1` value.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv));
        let s = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Mat::scalar(s), Op::Dot(a, b), needs)
    }

    /// Mean over rows `idx` of the squared Euclidean distance between
    /// `pred` and `target` rows.
    pub fn masked_patch_mse(&mut self, pred: Var, target: Mat, idx: Vec<usize>) -> Var {
        assert!(!idx.is_empty(), "masked mse over no rows");
        let pv = self.value(pred);
        assert!(pv.same_shape(&target));
        let total: f64 = idx
            .iter()
            .map(|&i| pv.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        let value = total / idx.len() as f64;
        let needs = self.needs(pred);
        self.push(Mat::scalar(value), Op::MaskedPatchMse { pred, target, idx }, needs)
    }

    /// `sum_j w_j * x_j` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let first = self.value(terms[0].0);
        let mut out = Mat::zeros(first.rows, first.cols);
        let mut needs = false;
        for &(v, w) in &terms {
            let tv = self.value(v);
            assert!(tv.same_shape(&out));
            out.data.iter_mut().zip(&tv.data).for_each(|(o, x)| *o += w * x);
            needs |= self.needs(v);
        }
        self.push(out, Op::WeightedSum(terms), needs)
    }

    /// Binary cross-entropy of a `1 x 1` logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let z = self.scalar(logit);
        let loss = math::softplus(z) - target * z;
        let needs = self.needs(logit);
        self.push(Mat::scalar(loss), Op::BceWithLogits { logit, target }, needs)
    }

    /// `(pred - target)^2` for a `1 x 1` prediction.
    pub fn squared_error(&mut self, pred: Var, target: f64) -> Var {
        let e = self.scalar(pred) - target;
        let needs = self.needs(pred);
        self.push(Mat::scalar(e * e), Op::SquaredError { pred, target }, needs)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// that reached it.
    pub fn backward(&self, loss: Var, n_params: usize) -> Grads {
        let mut grads = Grads::new(n_params);
        let mut adj: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut adj, &mut grads);
        }
        grads
    }

    fn propagate(&self, op: &Op, out: &Mat, g: Mat, adj: &mut [Option<Mat>], grads: &mut Grads) {
        let mut send = |adj: &mut [Option<Mat>], v: Var, m: Mat| {
            if !self.needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, &g),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm(1.0, View::of(&g), View::of(wv).t(), 0.0, ViewMut::of(&mut dx));
                    send(adj, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    gemm(1.0, View::of(xv).t(), View::of(&g), 0.0, ViewMut::of(&mut dw));
                    send(adj, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        send(adj, *b, column_sums(&g));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    send(adj, *a, g.clone());
                }
                send(adj, *b, g);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                send(adj, *x, dx);
            }
            Op::Scatter { parts } => {
                for (v, targets) in parts {
                    if self.needs(*v) {
                        send(adj, *v, g.gather_rows(targets));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let cols = g.cols as f64;
                if self.needs(*x) {
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let dxhat: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((d, dh), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *d = inv_std[r] * (dh - m1 - xh * m2);
                        }
                    }
                    send(adj, *x, dx);
                }
                if self.needs(*gamma) {
                    let mut dg = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((d, a), b) in dg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += a * b;
                        }
                    }
                    send(adj, *gamma, dg);
                }
                if self.needs(*beta) {
                    send(adj, *beta, column_sums(&g));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g;
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    let cdf = 0.5 * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = math::exp(-0.5 * v * v) / math::sqrt(2.0 * math::PI);
                    *d *= cdf + v * pdf;
                }
                send(adj, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g;
                dx.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                send(adj, *x, dx);
            }
            Op::Attention { q, k, v, heads, keys, probs } => {
                self.attention_backward(&g, (*q, *k, *v), *heads, keys.as_deref(), probs, adj, &mut send);
            }
            Op::MeanRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let s = 1.0 / idx.len() as f64;
                for &i in idx {
                    for (d, gg) in dx.row_mut(i).iter_mut().zip(&g.data) {
                        *d += gg * s;
                    }
                }
                send(adj, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let mut dx = Mat::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gr) = (out.row(r), g.row(r));
                    let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yy), gg) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gg - yy * yg) / norms[r];
                    }
                }
                send(adj, *x, dx);
            }
            Op::Dot(a, b) => {
                let s = g.data[0];
                if self.needs(*a) {
                    let mut da = self.value(*b).clone();
                    da.scale(s);
                    send(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = self.value(*a).clone();
                    db.scale(s);
                    send(adj, *b, db);
                }
            }
            Op::MaskedPatchMse { pred, target, idx } => {
                let pv = self.value(*pred);
                let mut dp = Mat::zeros(pv.rows, pv.cols);
                let s = 2.0 * g.data[0] / idx.len() as f64;
                for &i in idx {
                    for ((d, a), b) in dp.row_mut(i).iter_mut().zip(pv.row(i)).zip(target.row(i)) {
                        *d = s * (a - b);
                    }
                }
                send(adj, *pred, dp);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let mut d = g.clone();
                        d.scale(w);
                        send(adj, v, d);
                    }
                }
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.scalar(*logit);
                send(adj, *logit, Mat::scalar(g.data[0] * (math::sigmoid(z) - target)));
            }
            Op::SquaredError { pred, target } => {
                let e = self.scalar(*pred) - target;
                send(adj, *pred, Mat::scalar(g.data[0] * 2.0 * e));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        keys: Option<&[usize]>,
        probs: &[Mat],
        adj: &mut [Option<Mat>],
        send: &mut impl FnMut(&mut [Option<Mat>], Var, Mat),
    ) {
        let (qv, kv_full, vv_full) = (self.value(q), self.value(k), self.value(v));
        let (kv, vv) = match keys {
            Some(idx) => (kv_full.gather_rows(idx), vv_full.gather_rows(idx)),
            None => (kv_full.clone(), vv_full.clone()),
        };
        let d = qv.cols;
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut dq = Mat::zeros(qv.rows, d);
        let mut dk = Mat::zeros(kv.rows, d);
        let mut dv = Mat::zeros(vv.rows, d);
        for (h, p) in probs.iter().enumerate() {
            let mut dp = Mat::zeros(p.rows, p.cols);
            gemm(1.0, View::cols(g, h * hd, hd), View::cols(&vv, h * hd, hd).t(), 0.0, ViewMut::of(&mut dp));
            gemm(1.0, View::of(p).t(), View::cols(g, h * hd, hd), 0.0, ViewMut::cols(&mut dv, h * hd, hd));
            // softmax backward: ds = p * (dp - <dp, p>_row)
            for r in 0..p.rows {
                let (pr, dr) = (p.row(r), dp.row_mut(r));
                let dotv: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(x, pp)| *x = pp * (*x - dotv));
            }
            gemm(scale, View::of(&dp), View::cols(&kv, h * hd, hd), 0.0, ViewMut::cols(&mut dq, h * hd, hd));
            gemm(scale, View::of(&dp).t(), View::cols(qv, h * hd, hd), 0.0, ViewMut::cols(&mut dk, h * hd, hd));
        }
        let expand = |m: Mat, rows: usize| match keys {
            Some(idx) => {
                let mut full = Mat::zeros(rows, m.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in full.row_mut(i).iter_mut().zip(m.row(r)) {
                        *a += b;
                    }
                }
                full
            }
            None => m,
        };
        if self.needs(q) {
            send(adj, q, dq);
        }
        if self.needs(k) {
            send(adj, k, expand(dk, kv_full.rows));
        }
        if self.needs(v) {
            send(adj, v, expand(dv, vv_full.rows));
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::xavier_uniform;
    use crate::rng::stream;

    /// Central-difference check of every parameter coordinate of a small graph.
    fn check(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss, store.len());
        let h = 1e-5;
        for (id, p) in store.iter() {
            for c in 0..p.value.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data[c] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data[c] -= h;
                let eval = |s: &ParamStore| {
                    let mut g = Graph::new();
                    let l = build(&mut g, s);
                    g.scalar(l)
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |m| m.data[c]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{c}]: numeric {numeric} analytic {analytic}", p.name);
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = stream(&[seed]);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add(n, xavier_uniform(r, c, &mut rng));
        }
        s
    }

    #[test]
    fn block_like_graph_gradients() {
        let store = store_with(
            &[("x", 5, 8), ("wq", 8, 8), ("wk", 8, 8), ("wv", 8, 8), ("g", 1, 8), ("b", 1, 8), ("w2", 8, 3), ("t", 5, 3)],
            1,
        );
        check(&store, |g, s| {
            let ids: Vec<ParamId> = (0..8).map(ParamId).collect();
            let x = g.param(s, ids[0]);
            let (gg, bb) = (g.param(s, ids[4]), g.param(s, ids[5]));
            let n = g.layer_norm(x, gg, bb);
            let (wq, wk, wv) = (g.param(s, ids[1]), g.param(s, ids[2]), g.param(s, ids[3]));
            let q = g.linear(n, wq, Some(bb));
            let k = g.linear(n, wk, None);
            let v = g.linear(n, wv, None);
            let a = g.attention(q, k, v, 2, Some(vec![0, 2, 3]));
            let r = g.add(a, x);
            let act = g.gelu(r);
            let w2 = g.param(s, ids[6]);
            let y = g.linear(act, w2, None);
            let t = g.param(s, ids[7]);
            let target = Mat::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.37).cos()).collect());
            let mse = g.masked_patch_mse(y, target, vec![1, 4]);
            let pooled = g.mean_rows(y, vec![0, 3]);
            let pn = g.l2_normalize(pooled);
            let tt = g.gather_rows(t, vec![2]);
            let tn = g.l2_normalize(tt);
            let cos = g.dot(pn, tn);
            g.weighted_sum(vec![(mse, 1.0), (cos, -0.7)])
        });
    }

    #[test]
    fn scatter_gather_and_heads_losses() {
        let store = store_with(&[("a", 2, 4), ("b", 1, 4), ("w", 4, 1)], 2);
        check(&store, |g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            let rep = g.gather_rows(b, vec![0, 0]);
            let m = g.scatter_rows(5, 4, vec![(a, vec![4, 1]), (rep, vec![0, 2])]);
            let pooled = g.mean_rows(m, vec![0, 1, 3]);
            let w = g.param(s, ParamId(2));
            let z = g.linear(pooled, w, None);
            let l1 = g.bce_with_logits(z, 1.0);
            let l2 = g.squared_error(z, 0.3);
            g.weighted_sum(vec![(l1, 0.5), (l2, 2.0)])
        });
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(3, 2, vec![1.0, 0.0, 0.5, 2.0, -1.0, 1.0]));
        let a = g.attention(x, x, x, 1, Some(vec![1]));
        // a single admissible key: every row copies it
        for r in 0..3 {
            assert_eq!(g.value(a).row(r), &[0.5, 2.0]);
        }
        let (p, keys) = g.attention_probs(a).unwrap();
        assert_eq!(keys, Some(&[1usize][..]));
        assert!(p[0].data.iter().all(|&v| v == 1.0));
    }
}
