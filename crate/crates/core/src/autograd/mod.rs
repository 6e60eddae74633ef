//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the information its backward rule needs. Graphs are built fresh for every
//! forward pass and dropped afterwards.

pub mod gradcheck;

use std::sync::Arc;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map between row spaces: `out[i] = Σ w · in[j]`.
///
/// Covers gathers, scatter-adds, segment means, im2col patch extraction and
/// bilinear resampling with one backward rule.
#[derive(Clone, Debug, Default)]
pub struct RowMap {
    in_rows: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn new(in_rows: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(entries.iter().flatten().all(|&(j, _)| j < in_rows));
        Self { in_rows, entries }
    }

    /// Output row `i` copies input row `idx[i]`.
    pub fn gather(in_rows: usize, idx: &[usize]) -> Self {
        Self::new(in_rows, idx.iter().map(|&j| vec![(j, 1.0)]).collect())
    }

    /// Input row `i` is added into output row `dst[i]`.
    pub fn scatter_add(out_rows: usize, dst: &[usize]) -> Self {
        let mut entries = vec![Vec::new(); out_rows];
        for (j, &i) in dst.iter().enumerate() {
            entries[i].push((j, 1.0));
        }
        Self::new(dst.len(), entries)
    }

    /// Output row `s` is the mean of input rows `offsets[s]..offsets[s + 1]`.
    pub fn segment_mean(offsets: &[usize]) -> Self {
        let in_rows = *offsets.last().unwrap_or(&0);
        let entries = offsets
            .windows(2)
            .map(|w| {
                let n = (w[1] - w[0]) as f64;
                (w[0]..w[1]).map(|j| (j, 1.0 / n)).collect()
            })
            .collect();
        Self::new(in_rows, entries)
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<(usize, f64)>] {
        &self.entries
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows(), self.in_rows, "row map input mismatch");
        let mut out = Matrix::zeros(self.entries.len(), x.cols());
        for (i, row) in self.entries.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in row {
                for (d, s) in dst.iter_mut().zip(x.row(j)) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Matrix, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(self.in_rows, cols);
        for (i, row) in self.entries.iter().enumerate() {
            let src = g.row(i);
            for &(j, w) in row {
                for (d, s) in out.row_mut(j).iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Abs(Var),
    LayerNorm { x: Var, normed: Matrix, inv_std: Vec<f64> },
    HCat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Rows(Var, Arc<RowMap>),
    Sum(Var),
    RowNorm(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    SoftmaxCe { logits: Var, probs: Matrix, targets: Arc<Vec<usize>> },
    Focal { logits: Var, grad: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, segs: Arc<Vec<usize>>, heads: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the matching shape.
    pub fn get_or_zeros(&self, v: Var, g: &Graph) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = g.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Input that receives gradients.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Sum of scalar-shaped (or equal-shaped) nodes, each with a weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(t, w) in &terms[1..] {
            let s = self.scale(t, w);
            acc = self.add(acc, s);
        }
        acc
    }

    /// `x + b` with `b` a `1 × cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (d, s) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *d += s;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(v, Op::AddBias(x, b), ng)
    }

    /// `x ⊙ g` with `g` a `1 × cols` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        assert_eq!(gv.shape(), (1, xv.cols()), "row scale shape mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (d, s) in v.row_mut(r).iter_mut().zip(gv.data()) {
                *d *= s;
            }
        }
        let ng = self.ng(x) || self.ng(g);
        self.push(v, Op::MulRow(x, g), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, a) in normed.row_mut(r).iter_mut().zip(row) {
                *d = (a - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(normed.clone(), Op::LayerNorm { x, normed, inv_std }, ng)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hcat(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::HCat(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols(), "column slice out of range");
        let mut v = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let ng = self.ng(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn rows(&mut self, x: Var, map: Arc<RowMap>) -> Var {
        let v = map.apply(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Rows(x, map), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of every row, as a column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Matrix::from_vec(
            xv.rows(),
            1,
            (0..xv.rows()).map(|r| xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt()).collect(),
        );
        let ng = self.ng(x);
        self.push(v, Op::RowNorm(x), ng)
    }

    /// Rows scaled to unit length; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                for a in v.row_mut(r) {
                    *a /= n;
                }
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(v, Op::RowNormalize { x, norms }, ng)
    }

    /// Summed cross-entropy of row-wise softmax against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - m).exp()).sum();
            let lse = m + z.ln();
            for (p, a) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (a - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(total), Op::SoftmaxCe { logits, probs, targets }, ng)
    }

    /// Weighted sum of focal binary cross-entropy terms over a column of logits.
    ///
    /// `targets` are 0/1 labels; `weights` scale each row's term.
    pub fn focal_bce(&mut self, logits: Var, targets: &[f64], weights: &[f64], alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.cols(), 1, "focal loss expects a logit column");
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(lv.rows(), weights.len());
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(lv.rows());
        for ((&z, &y), &w) in lv.data().iter().zip(targets).zip(weights) {
            let (l, g) = focal_term(z, y, alpha, gamma);
            total += w * l;
            grad.push(w * g);
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(total), Op::Focal { logits, grad }, ng)
    }

    /// Multi-head scaled dot-product attention within token segments.
    ///
    /// Rows of `q`, `k`, `v` are tokens; tokens `segs[s]..segs[s + 1]` attend
    /// only to each other. Channels are split evenly into `heads` heads.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segs: Arc<Vec<usize>>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qv.shape();
        assert_eq!(kv.shape(), (t, d));
        assert_eq!(vv.shape(), (t, d));
        assert_eq!(*segs.last().unwrap_or(&0), t, "segments must cover all tokens");
        assert!(heads > 0 && d % heads == 0, "channels must split evenly over heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::new();
        for w in segs.windows(2) {
            let (s0, n) = (w[0], w[1] - w[0]);
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..n {
                    let qi = &qv.row(s0 + i)[c0..c0 + dh];
                    let base = probs.len();
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..n {
                        let kj = &kv.row(s0 + j)[c0..c0 + dh];
                        let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        m = m.max(s);
                        probs.push(s);
                    }
                    let mut z = 0.0;
                    for p in &mut probs[base..] {
                        *p = (*p - m).exp();
                        z += *p;
                    }
                    for p in &mut probs[base..] {
                        *p /= z;
                    }
                    let orow = &mut out.row_mut(s0 + i)[c0..c0 + dh];
                    for j in 0..n {
                        let p = probs[base + j];
                        for (o, x) in orow.iter_mut().zip(&vv.row(s0 + j)[c0..c0 + dh]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, probs, segs, heads }, ng)
    }

    /// Gradients of scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g), grads);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let mut db = Matrix::zeros(self.value(*b).rows(), av.cols());
                    gemm(true, false, g, av, &mut db, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.scaled(-1.0), grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s), grads),
            Op::AddBias(x, b) => {
                if self.ng(*b) {
                    acc(*b, column_sums(g), grads);
                }
                acc(*x, g.clone(), grads);
            }
            Op::MulRow(x, s) => {
                let sv = self.value(*s);
                if self.ng(*s) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    acc(*s, column_sums(&prod), grads);
                }
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (d, w) in dx.row_mut(r).iter_mut().zip(sv.data()) {
                            *d *= w;
                        }
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                acc(*x, d, grads);
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * sign(xv));
                acc(*x, d, grads);
            }
            Op::LayerNorm { x, normed, inv_std } => {
                let cols = normed.cols() as f64;
                let mut dx = Matrix::zeros(normed.rows(), normed.cols());
                for r in 0..normed.rows() {
                    let (gr, yr) = (g.row(r), normed.row(r));
                    let mg = gr.iter().sum::<f64>() / cols;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, dx, grads);
            }
            Op::HCat(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.ng(*p) {
                        let mut d = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        acc(*p, d, grads);
                    }
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d, grads);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, g.clone().reshaped(r, c), grads);
            }
            Op::Rows(x, map) => {
                let c = self.value(*x).cols();
                acc(*x, map.apply_transpose(g, c), grads);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g.data()[0]), grads);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let nv = &node.value;
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = nv.data()[r];
                    if n > 0.0 {
                        let f = g.data()[r] / n;
                        for (dd, a) in d.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *dd = f * a;
                        }
                    }
                }
                acc(*x, d, grads);
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    if n > 0.0 {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dd, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *dd = (gv - yv * dot) / n;
                        }
                    }
                }
                acc(*x, d, grads);
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                let s = g.data()[0];
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for a in row.iter_mut() {
                        *a *= s;
                    }
                }
                acc(*logits, d, grads);
            }
            Op::Focal { logits, grad } => {
                let s = g.data()[0];
                let d = Matrix::from_vec(grad.len(), 1, grad.iter().map(|a| a * s).collect());
                acc(*logits, d, grads);
            }
            Op::Attention { q, k, v, probs, segs, heads } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, dm) = qv.shape();
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(t, dm);
                let mut dk = Matrix::zeros(t, dm);
                let mut dv = Matrix::zeros(t, dm);
                let mut pos = 0;
                let mut dp = Vec::new();
                for w in segs.windows(2) {
                    let (s0, n) = (w[0], w[1] - w[0]);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let p = &probs[pos..pos + n];
                            pos += n;
                            let go = &g.row(s0 + i)[c0..c0 + dh];
                            dp.clear();
                            for j in 0..n {
                                let vj = &vv.row(s0 + j)[c0..c0 + dh];
                                dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                for (d, gg) in dv.row_mut(s0 + j)[c0..c0 + dh].iter_mut().zip(go) {
                                    *d += p[j] * gg;
                                }
                            }
                            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let kj = kv.get(s0 + j, c0 + c);
                                    let qi = qv.get(s0 + i, c0 + c);
                                    dq.data_mut()[(s0 + i) * dm + c0 + c] += ds * kj;
                                    dk.data_mut()[(s0 + j) * dm + c0 + c] += ds * qi;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable `ln σ(z)`.
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss value and its derivative with respect to the logit.
fn focal_term(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if y > 0.5 {
        let logp = log_sigmoid(z);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * logp;
        let grad = alpha * q.powf(gamma) * (gamma * p * logp - q);
        (loss, grad)
    } else {
        let log1mp = log_sigmoid(-z);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log1mp;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log1mp);
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradcheckOptions};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn assert_passes(name: &str, inputs: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report = check_gradients(name, &inputs, &f, &GradcheckOptions::default());
        assert!(report.passed(), "{name}: max rel err {}", report.max_rel_err);
    }

    #[test]
    fn affine_chain_gradients() {
        let mut r = rng();
        let x = Matrix::randn(4, 3, 1.0, &mut r);
        let w = Matrix::randn(3, 5, 1.0, &mut r);
        let b = Matrix::randn(1, 5, 1.0, &mut r);
        let report = check_gradients(
            "affine",
            &[x, w, b],
            &|g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_bias(y, v[2]);
                let sq = g.mul(y, y);
                g.sum(sq)
            },
            &GradcheckOptions::default(),
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_and_row_ops() {
        let mut r = rng();
        let x = Matrix::randn(3, 6, 1.0, &mut r);
        let gamma = Matrix::randn(1, 6, 1.0, &mut r);
        let probe = Matrix::randn(3, 6, 1.0, &mut r);
        assert_passes("layer_norm", vec![x.clone(), gamma, probe.clone()], |g, v| {
            let y = g.layer_norm(v[0], 1e-5);
            let y = g.mul_row(y, v[1]);
            let y = g.mul(y, v[2]);
            g.sum(y)
        });
        assert_passes("row_norm", vec![x.clone()], |g, v| {
            let n = g.row_norm(v[0]);
            g.sum(n)
        });
        assert_passes("row_normalize", vec![x, probe], |g, v| {
            let n = g.row_normalize(v[0]);
            let p = g.mul(n, v[1]);
            g.sum(p)
        });
    }

    #[test]
    fn structural_ops() {
        let mut r = rng();
        let a = Matrix::randn(4, 2, 1.0, &mut r);
        let b = Matrix::randn(4, 3, 1.0, &mut r);
        let probe = Matrix::randn(6, 3, 1.0, &mut r);
        let map = Arc::new(RowMap::new(
            4,
            vec![vec![(0, 1.0)], vec![(1, 0.5), (3, 0.25)], vec![], vec![(2, 2.0)], vec![(0, -1.0)], vec![(3, 1.0)]],
        ));
        assert_passes("hcat_slice_rows", vec![a, b, probe], move |g, v| {
            let c = g.hcat(&[v[0], v[1]]);
            let s = g.slice_cols(c, 1, 4);
            let s = g.relu(s);
            let m = g.rows(s, map.clone());
            let p = g.mul(m, v[2]);
            let t = g.reshape(p, 3, 6);
            let t = g.abs(t);
            g.sum(t)
        });
    }

    #[test]
    fn softmax_ce_and_matmul_t() {
        let mut r = rng();
        let a = Matrix::randn(5, 4, 1.0, &mut r);
        let b = Matrix::randn(3, 4, 1.0, &mut r);
        let targets = Arc::new(vec![0, 2, 1, 1, 0]);
        assert_passes("softmax_ce", vec![a, b], move |g, v| {
            let s = g.matmul_t(v[0], v[1]);
            g.softmax_cross_entropy(s, targets.clone())
        });
    }

    #[test]
    fn focal_gradient() {
        let mut r = rng();
        let z = Matrix::randn(8, 1, 2.0, &mut r);
        let y = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let w = vec![1.0, 0.5, 2.0, 1.0, 1.0, 1.0, 3.0, 1.0];
        assert_passes("focal", vec![z], move |g, v| g.focal_bce(v[0], &y, &w, 0.25, 2.0));
    }

    #[test]
    fn attention_gradient_with_ragged_segments() {
        let mut r = rng();
        let q = Matrix::randn(7, 8, 1.0, &mut r);
        let k = Matrix::randn(7, 8, 1.0, &mut r);
        let v = Matrix::randn(7, 8, 1.0, &mut r);
        let probe = Matrix::randn(7, 8, 1.0, &mut r);
        let segs = Arc::new(vec![0, 1, 4, 7]);
        assert_passes("attention", vec![q, k, v, probe], move |g, x| {
            let o = g.segment_attention(x[0], x[1], x[2], segs.clone(), 2);
            let p = g.mul(o, x[3]);
            g.sum(p)
        });
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut g = Graph::new();
        let q = g.constant(Matrix::from_vec(1, 2, vec![3.0, -1.0]));
        let v = g.constant(Matrix::from_vec(1, 2, vec![0.5, 0.25]));
        let o = g.segment_attention(q, q, v, Arc::new(vec![0, 1]), 1);
        assert_eq!(g.value(o).data(), &[0.5, 0.25]);
    }

    #[test]
    fn focal_saturates_for_confident_correct_logits() {
        let (l1, _) = focal_term(30.0, 1.0, 0.25, 2.0);
        let (l0, _) = focal_term(-30.0, 0.0, 0.25, 2.0);
        assert!(l1 < 1e-12 && l0 < 1e-12);
        let (lw, _) = focal_term(-30.0, 1.0, 0.25, 2.0);
        assert!((lw - 0.25 * 30.0).abs() < 1e-6);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::scalar(2.0));
        let b = g.leaf(Matrix::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
