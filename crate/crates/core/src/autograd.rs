//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.

use std::collections::BTreeSet;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, softplus, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, cache: LstmCache },
    Gather { table: Var, ids: Vec<usize> },
    RowCosine { a: Var, b: Var, norms_a: Vec<f64>, norms_b: Vec<f64> },
    BceLogits { x: Var, targets: Mat },
    MaxAll { x: Var, argmax: usize },
    LogSumExp(Var),
    Pick(Var, usize),
    SumAll(Var),
}

#[derive(Debug)]
struct LstmCache {
    /// Per step activations `[i, f, g, o]`, `T x 4H`.
    gates: Mat,
    /// Cell states, `T x H`.
    cells: Mat,
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    touched: BTreeSet<ParamId>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), touched: BTreeSet::new() }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Parameters read by this graph so far.
    pub fn touched(&self) -> &BTreeSet<ParamId> {
        &self.touched
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.touched.insert(id);
        let m = self.params.value(id).clone();
        self.push(m, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul(self.value(b));
        self.push(m, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_nt(self.value(b));
        self.push(m, Op::MatMulNT(a, b))
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_tn(self.value(b));
        self.push(m, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(m, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(m, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(m, Op::Mul(a, b))
    }

    /// Adds the `1 x C` row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a row vector");
        assert_eq!(xv.cols, rv.cols, "add_row width mismatch");
        let mut m = xv.clone();
        for r in 0..m.rows {
            for (o, b) in m.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(m, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let m = self.value(x).map(|v| v * k);
        self.push(m, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = self.value(x).map(|v| v.max(0.0));
        self.push(m, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let m = self.value(x).map(sigmoid);
        self.push(m, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let m = self.value(x).map(f64::tanh);
        self.push(m, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let m = self.value(x).map(softplus);
        self.push(m, Op::Softplus(x))
    }

    /// Softmax along each row. Columns with `col_mask[j] == false` get
    /// exactly zero weight; at least one column must be unmasked.
    pub fn softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Var {
        let m = softmax_rows_value(self.value(x), col_mask);
        self.push(m, Op::SoftmaxRows(x))
    }

    /// Softmax down each column. Masked columns are all zero.
    pub fn softmax_cols(&mut self, x: Var, col_mask: Option<&[bool]>) -> Var {
        let m = softmax_rows_value(&self.value(x).transpose(), None).transpose();
        let m = match col_mask {
            Some(mask) => {
                let mut m = m;
                for r in 0..m.rows {
                    for (c, &keep) in mask.iter().enumerate() {
                        if !keep {
                            m.set(r, c, 0.0);
                        }
                    }
                }
                m
            }
            None => m,
        };
        self.push(m, Op::SoftmaxCols(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let m = self.value(x).transpose();
        self.push(m, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let m = Mat::concat_cols(&vals);
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let m = Mat::concat_rows(&vals);
        self.push(m, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x).slice_cols(start, len);
        self.push(m, Op::SliceCols(x, start))
    }

    /// Per-row layer normalization with learned `1 x D` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Mat::zeros(rows, d);
        let mut out = Mat::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mu) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Single-layer LSTM over the rows of `x` with zero initial state.
    /// Gate layout in the `4H` axis is `[input, forget, cell, output]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (wih, whh, bv) = (self.value(w_ih), self.value(w_hh), self.value(b));
        let h = whh.rows;
        assert_eq!(whh.cols, 4 * h, "lstm w_hh must be H x 4H");
        assert_eq!(wih.shape(), (xv.cols, 4 * h), "lstm w_ih must be D x 4H");
        let steps = xv.rows;
        let mut pre = xv.matmul(wih);
        for t in 0..steps {
            for (p, bb) in pre.row_mut(t).iter_mut().zip(&bv.data) {
                *p += bb;
            }
        }
        let mut gates = Mat::zeros(steps, 4 * h);
        let mut cells = Mat::zeros(steps, h);
        let mut hidden = Mat::zeros(steps, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for t in 0..steps {
            let mut z = pre.row(t).to_vec();
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (zz, w) in z.iter_mut().zip(whh.row(k)) {
                    *zz += hv * w;
                }
            }
            let grow = gates.row_mut(t);
            for j in 0..h {
                grow[j] = sigmoid(z[j]);
                grow[h + j] = sigmoid(z[h + j]);
                grow[2 * h + j] = z[2 * h + j].tanh();
                grow[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            for j in 0..h {
                let c = grow[h + j] * c_prev[j] + grow[j] * grow[2 * h + j];
                let hv = grow[3 * h + j] * c.tanh();
                c_prev[j] = c;
                h_prev[j] = hv;
            }
            cells.row_mut(t).copy_from_slice(&c_prev);
            hidden.row_mut(t).copy_from_slice(&h_prev);
        }
        self.push(hidden, Op::Lstm { x, w_ih, w_hh, b, cache: LstmCache { gates, cells } })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut m = Mat::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(m, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Cosine similarity of matching rows, `L x 1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_cosine shape mismatch");
        let mut out = Mat::zeros(av.rows, 1);
        let mut norms_a = Vec::with_capacity(av.rows);
        let mut norms_b = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let (x, y) = (av.row(r), bv.row(r));
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.data[r] = dot / (na * nb + COSINE_EPS);
            norms_a.push(na);
            norms_b.push(nb);
        }
        self.push(out, Op::RowCosine { a, b, norms_a, norms_b })
    }

    /// Sum over all elements of binary cross-entropy with logits.
    pub fn bce_logits(&mut self, x: Var, targets: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), targets.shape(), "bce target shape mismatch");
        let s: f64 = xv.data.iter().zip(&targets.data).map(|(&z, &y)| softplus(z) - y * z).sum();
        self.push(Mat::scalar(s), Op::BceLogits { x, targets })
    }

    /// Maximum over all elements; the gradient flows to the first argmax.
    pub fn max_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = 0;
        for (i, &v) in xv.data.iter().enumerate() {
            if v > xv.data[argmax] {
                argmax = i;
            }
        }
        let m = Mat::scalar(xv.data[argmax]);
        self.push(m, Op::MaxAll { x, argmax })
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let m = Mat::scalar(logsumexp(&self.value(x).data));
        self.push(m, Op::LogSumExp(x))
    }

    /// Element `idx` of the flattened value, as a scalar.
    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let m = Mat::scalar(self.value(x).data[idx]);
        self.push(m, Op::Pick(x, idx))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let m = Mat::scalar(self.value(x).sum());
        self.push(m, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from the scalar `loss`; returns gradients w.r.t. the
    /// parameters read by this graph.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows, av.cols);
                    matmul_nt_acc(&dy, bv, &mut da);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(av, &dy, &mut db);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // y = a b^T: da = dy b, db = dy^T a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows, av.cols);
                    matmul_acc(&dy, bv, &mut da);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(&dy, av, &mut db);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulTN(a, b) => {
                    // y = a^T b: da = b dy^T, db = a dy
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows, av.cols);
                    matmul_nt_acc(bv, &dy, &mut da);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    matmul_acc(av, &dy, &mut db);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, dy.clone());
                    acc(&mut g, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, dy.map(|v| -v));
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |d, y| d * y);
                    let db = dy.zip_map(self.value(*a), |d, x| d * x);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::AddRow(x, row) => {
                    let mut dr = Mat::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, v) in dr.data.iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut g, *row, dr);
                    acc(&mut g, *x, dy);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    acc(&mut g, *x, dy.map(|v| v * k));
                }
                Op::Relu(x) => {
                    let dx = dy.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 });
                    acc(&mut g, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy.zip_map(&node.value, |d, s| d * s * (1.0 - s));
                    acc(&mut g, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = dy.zip_map(&node.value, |d, t| d * (1.0 - t * t));
                    acc(&mut g, *x, dx);
                }
                Op::Softplus(x) => {
                    let dx = dy.zip_map(self.value(*x), |d, v| d * sigmoid(v));
                    acc(&mut g, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let mut dx = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, dr) = (p.row(r), dy.row(r));
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (o, (pv, dv)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(dr)) {
                            *o = pv * (dv - dot);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::SoftmaxCols(x) => {
                    let p = &node.value;
                    let mut dx = Mat::zeros(p.rows, p.cols);
                    for c in 0..p.cols {
                        let dot: f64 = (0..p.rows).map(|r| p.get(r, c) * dy.get(r, c)).sum();
                        for r in 0..p.rows {
                            dx.set(r, c, p.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Transpose(x) => acc(&mut g, *x, dy.transpose()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        acc(&mut g, p, dy.slice_cols(off, w));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows;
                        acc(&mut g, p, dy.slice_rows(off, h));
                        off += h;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut g, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let (rows, d) = xhat.shape();
                    let mut dx = Mat::zeros(rows, d);
                    let mut dg = Mat::zeros(1, d);
                    let mut db = Mat::zeros(1, d);
                    for r in 0..rows {
                        let (dr, hr) = (dy.row(r), xhat.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        let mut dh = vec![0.0; d];
                        for c in 0..d {
                            dg.data[c] += dr[c] * hr[c];
                            db.data[c] += dr[c];
                            dh[c] = dr[c] * gv.data[c];
                            sum_dh += dh[c];
                            sum_dh_h += dh[c] * hr[c];
                        }
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            dx.set(r, c, k * (d as f64 * dh[c] - sum_dh - hr[c] * sum_dh_h));
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *gamma, dg);
                    acc(&mut g, *beta, db);
                }
                Op::Lstm { x, w_ih, w_hh, b, cache } => {
                    let (dx, dwih, dwhh, dbias) = self.lstm_backward(*x, *w_ih, *w_hh, cache, &node.value, &dy);
                    acc(&mut g, *x, dx);
                    acc(&mut g, *w_ih, dwih);
                    acc(&mut g, *w_hh, dwhh);
                    acc(&mut g, *b, dbias);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Mat::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut g, *table, dt);
                }
                Op::RowCosine { a, b, norms_a, norms_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows, av.cols);
                    let mut dbm = Mat::zeros(bv.rows, bv.cols);
                    for r in 0..av.rows {
                        let (x, y) = (av.row(r), bv.row(r));
                        let (na, nb) = (norms_a[r], norms_b[r]);
                        let den = na * nb + COSINE_EPS;
                        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                        let d = dy.data[r];
                        // d(dot/den)/dx = y/den - dot * nb * (x/na) / den^2
                        let ka = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                        let kb = if nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                        for c in 0..av.cols {
                            da.set(r, c, d * (y[c] / den - ka * x[c]));
                            dbm.set(r, c, d * (x[c] / den - kb * y[c]));
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, dbm);
                }
                Op::BceLogits { x, targets } => {
                    let d = dy.item();
                    let dx = self.value(*x).zip_map(targets, |z, y| d * (sigmoid(z) - y));
                    acc(&mut g, *x, dx);
                }
                Op::MaxAll { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    dx.data[*argmax] = dy.item();
                    acc(&mut g, *x, dx);
                }
                Op::LogSumExp(x) => {
                    let xv = self.value(*x);
                    let lse = node.value.item();
                    let d = dy.item();
                    acc(&mut g, *x, xv.map(|v| d * (v - lse).exp()));
                }
                Op::Pick(x, i) => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    dx.data[*i] = dy.item();
                    acc(&mut g, *x, dx);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    acc(&mut g, *x, Mat::filled(xv.rows, xv.cols, dy.item()));
                }
            }
        }
        out
    }

    fn lstm_backward(&self, x: Var, w_ih: Var, w_hh: Var, cache: &LstmCache, hidden: &Mat, dy: &Mat) -> (Mat, Mat, Mat, Mat) {
        let (xv, wih, whh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        let h = whh.rows;
        let steps = xv.rows;
        let mut dz_all = Mat::zeros(steps, 4 * h);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..steps).rev() {
            let gr = cache.gates.row(t);
            let c = cache.cells.row(t);
            let dh: Vec<f64> = dy.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let dz = dz_all.row_mut(t);
            for j in 0..h {
                let (i, f, gg, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let tc = c[j].tanh();
                let c_prev = if t > 0 { cache.cells.get(t - 1, j) } else { 0.0 };
                let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            // dh_{t-1} = dz W_hh^T
            for (k, dn) in dh_next.iter_mut().enumerate() {
                *dn = whh.row(k).iter().zip(dz.iter()).map(|(w, d)| w * d).sum();
            }
        }
        let mut dx = Mat::zeros(xv.rows, xv.cols);
        matmul_nt_acc(&dz_all, wih, &mut dx);
        let mut dwih = Mat::zeros(wih.rows, wih.cols);
        matmul_tn_acc(xv, &dz_all, &mut dwih);
        let mut dwhh = Mat::zeros(h, 4 * h);
        if steps > 1 {
            let h_prev = hidden.slice_rows(0, steps - 1);
            let dz_tail = dz_all.slice_rows(1, steps - 1);
            matmul_tn_acc(&h_prev, &dz_tail, &mut dwhh);
        }
        let mut db = Mat::zeros(1, 4 * h);
        for t in 0..steps {
            for (o, v) in db.data.iter_mut().zip(dz_all.row(t)) {
                *o += v;
            }
        }
        (dx, dwih, dwhh, db)
    }
}

fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows_value(x: &Mat, col_mask: Option<&[bool]>) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let keep = |c: usize| col_mask.map_or(true, |m| m[c]);
        let mx = (0..x.cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        assert!(mx > f64::NEG_INFINITY, "softmax over fully masked row");
        let mut z = 0.0;
        let orow = out.row_mut(r);
        for c in 0..x.cols {
            if keep(c) {
                let e = (row[c] - mx).exp();
                orow[c] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences on every parameter element of `store`.
    fn check(store: &ParamStore, f: &dyn Fn(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let mut s = store.clone();
        for (id, p) in store.iter() {
            for k in 0..p.value.len() {
                let orig = p.value.data[k];
                s.value_mut(id).data[k] = orig + eps;
                let lp = {
                    let mut g = Graph::new(&s);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                s.value_mut(id).data[k] = orig - eps;
                let lm = {
                    let mut g = Graph::new(&s);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                s.value_mut(id).data[k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = grads.get(id).map_or(0.0, |m| m.data[k]);
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let a = s.add("a", Tag::Backbone, rand_mat(&mut rng, 3, 4));
        let b = s.add("b", Tag::Backbone, rand_mat(&mut rng, 4, 2));
        let c = s.add("c", Tag::Backbone, rand_mat(&mut rng, 3, 2));
        let r = s.add("r", Tag::Backbone, rand_mat(&mut rng, 1, 2));
        let err = check(&s, &|g| {
            let (a, b, c, r) = (g.param(a), g.param(b), g.param(c), g.param(r));
            let ab = g.matmul(a, b);
            let x = g.mul(ab, c);
            let x = g.add_row(x, r);
            let y = g.tanh(x);
            let z = g.sigmoid(ab);
            let w = g.sub(y, z);
            let w = g.softplus(w);
            let nt = g.matmul_nt(w, c);
            let tn = g.matmul_tn(nt, a);
            let t = g.transpose(tn);
            let s = g.scale(t, 0.7);
            g.mean_all(s)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let x = s.add("x", Tag::Backbone, rand_mat(&mut rng, 4, 3));
        let y = s.add("y", Tag::Backbone, rand_mat(&mut rng, 4, 2));
        let gamma = s.add("gamma", Tag::Backbone, rand_mat(&mut rng, 1, 5));
        let beta = s.add("beta", Tag::Backbone, rand_mat(&mut rng, 1, 5));
        let table = s.add("table", Tag::Backbone, rand_mat(&mut rng, 6, 5));
        let err = check(&s, &|g| {
            let (x, y) = (g.param(x), g.param(y));
            let cat = g.concat_cols(&[x, y]);
            let ln = {
                let (ga, be) = (g.param(gamma), g.param(beta));
                g.layer_norm(cat, ga, be)
            };
            let tb = g.param(table);
            let emb = g.gather(tb, &[1, 3, 1, 5]);
            let m = g.mul(ln, emb);
            let part = g.slice_cols(m, 1, 3);
            let rows = g.concat_rows(&[part, x]);
            let sm = g.softmax_rows(rows, Some(&[true, false, true]));
            let smc = g.softmax_cols(m, Some(&[true, true, false, true, true]));
            let cos = g.row_cosine(ln, smc);
            let mx = g.max_all(cos);
            let lse = g.logsumexp(sm);
            let p = g.pick(sm, 4);
            let t = g.add(mx, lse);
            let t = g.add(t, p);
            let targets = Mat::from_vec(8, 3, (0..24).map(|i| (i % 2) as f64).collect());
            let bce = g.bce_logits(rows, targets);
            let bce = g.scale(bce, 0.1);
            let r = g.relu(bce);
            g.add(t, r)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn lstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = s.add("x", Tag::Backbone, rand_mat(&mut rng, 5, 3));
        let wih = s.add("wih", Tag::Backbone, rand_mat(&mut rng, 3, 8));
        let whh = s.add("whh", Tag::Backbone, rand_mat(&mut rng, 2, 8));
        let b = s.add("b", Tag::Backbone, rand_mat(&mut rng, 1, 8));
        let err = check(&s, &|g| {
            let (x, wih, whh, b) = (g.param(x), g.param(wih), g.param(whh), g.param(b));
            let h = g.lstm(x, wih, whh, b);
            let h2 = g.mul(h, h);
            g.sum_all(h2)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn masked_softmax_rows_zero_weight() {
        let x = Mat::from_vec(2, 3, vec![1.0, 50.0, -1.0, 0.0, 0.0, 0.0]);
        let p = softmax_rows_value(&x, Some(&[true, false, true]));
        for r in 0..2 {
            assert_eq!(p.get(r, 1), 0.0);
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tag::Backbone, Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new(&s);
        let av = g.param(a);
        let d = g.detach(av);
        let l = g.sum_all(d);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
    }
}
