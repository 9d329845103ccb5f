//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly: each call computes its value
//! immediately and remembers how to push a gradient back to its inputs.
//! Inference and training therefore share one code path; inference simply
//! never calls [`Tape::backward`].

use std::sync::Arc;

use crate::tensor::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A real-linear map with a known adjoint. Used for the spectral transforms
/// so the tape can differentiate through them without unrolling the FFT.
pub trait LinearMap: Send + Sync {
    fn apply(&self, x: &Mat) -> Mat;
    fn adjoint(&self, g: &Mat) -> Mat;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    GatherRows(Var, Arc<Vec<usize>>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MeanRowGroups(Var, Arc<Vec<Vec<usize>>>),
    Linear(Var, Arc<dyn LinearMap>),
    Sum(Var),
    Sqrt(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Row-wise attention mask: `allowed[r * cols + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// Softmax over each row; masked entries get exactly zero weight.
pub fn softmax_rows(x: &Mat, mask: Option<&Mask>) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let allowed = |c: usize| mask.is_none_or(|m| m.allowed[r * x.cols + c]);
        let row = x.row(r);
        let max = (0..x.cols)
            .filter(|&c| allowed(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..row.len() {
            if allowed(c) {
                orow[c] = (row[c] - max).exp();
                total += orow[c];
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise normalization to zero mean and unit variance, returning the
/// normalized rows and the per-row inverse standard deviations.
pub fn normalize_rows(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let n = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

const SQRT_FLOOR: f64 = 1e-150;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A leaf node. Whether it is a parameter or a constant is decided by
    /// whoever reads its gradient.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.shape(), (1, xv.cols), "add_row: bias shape");
        let mut v = xv.clone();
        for r in 0..v.rows {
            for (o, b) in v.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, row))
    }

    /// Scales row `r` of `x` by `w[r]` where `w` is `rows x 1`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape(), (xv.rows, 1), "mul_col: weight shape");
        let mut v = xv.clone();
        for r in 0..v.rows {
            let s = wv.data[r];
            for o in v.row_mut(r) {
                *o *= s;
            }
        }
        self.push(v, Op::MulCol(x, w))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a + s);
        self.push(v, Op::AddScalar(x))
    }

    /// Affine map `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Var {
        if let Some(m) = mask {
            assert_eq!((m.rows, m.cols), self.shape(x), "softmax: mask shape");
        }
        let v = softmax_rows(self.value(x), mask);
        self.push(v, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xhat, _) = normalize_rows(self.value(x), eps);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xhat.cols), "layer_norm: gamma shape");
        let mut v = xhat;
        for r in 0..v.rows {
            for ((o, gi), bi) in v.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gi + bi;
            }
        }
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut v = Mat::zeros(idx.len(), xv.cols);
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(xv.row(j));
        }
        self.push(v, Op::GatherRows(x, idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        self.gather_rows(x, Arc::new((start..start + len).collect()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols: out of range");
        let mut v = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x))
    }

    /// Output row `i` is the mean of the rows of `x` listed in `groups[i]`.
    pub fn mean_row_groups(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let mut v = Mat::zeros(groups.len(), xv.cols);
        for (i, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "mean_row_groups: empty group");
            let inv = 1.0 / g.len() as f64;
            let orow = v.row_mut(i);
            for &j in g {
                for (o, a) in orow.iter_mut().zip(xv.row(j)) {
                    *o += a;
                }
            }
            for o in orow {
                *o *= inv;
            }
        }
        self.push(v, Op::MeanRowGroups(x, groups))
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Var {
        let v = map.apply(self.value(x));
        self.push(v, Op::Linear(x, map))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0).sqrt());
        self.push(v, Op::Sqrt(x))
    }

    /// Reverse sweep from a `1 x 1` output, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(seed));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(val(*b)));
                accumulate(grads, *b, val(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b)));
                accumulate(grads, *b, g.t_matmul(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                let mut gr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, a) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += a;
                    }
                }
                accumulate(grads, *row, gr);
            }
            Op::MulCol(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = g.clone();
                let mut gw = Mat::zeros(wv.rows, 1);
                for r in 0..g.rows {
                    let s = wv.data[r];
                    gw.data[r] = crate::tensor::dot(g.row(r), xv.row(r));
                    for o in gx.row_mut(r) {
                        *o *= s;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|a| a * s)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => accumulate(grads, *x, g.zip_map(val(*x), |gi, xi| gi * gelu_grad(xi))),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = crate::tensor::dot(yr, gr);
                    for ((o, yi), gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xhat, inv) = normalize_rows(val(*x), *eps);
                let gam = val(*gamma);
                let n = xhat.cols as f64;
                let mut gg = Mat::zeros(1, xhat.cols);
                let mut gb = Mat::zeros(1, xhat.cols);
                let mut gx = Mat::zeros(xhat.rows, xhat.cols);
                for r in 0..xhat.rows {
                    let (xr, gr) = (xhat.row(r), g.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..xhat.cols {
                        gg.data[c] += gr[c] * xr[c];
                        gb.data[c] += gr[c];
                        let d = gr[c] * gam.data[c];
                        mean_d += d;
                        mean_dx += d * xr[c];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    let out = gx.row_mut(r);
                    for c in 0..xhat.cols {
                        let d = gr[c] * gam.data[c];
                        out[c] = inv[r] * (d - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (i, &j) in idx.iter().enumerate() {
                    for (o, a) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += a;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let chunk = Mat::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                    accumulate(grads, p, chunk);
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut chunk = Mat::zeros(r, c);
                    for i in 0..r {
                        chunk.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    accumulate(grads, p, chunk);
                    off += c;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                accumulate(grads, *x, g.clone().reshaped(r, c));
            }
            Op::MeanRowGroups(x, groups) => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (i, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &j in grp {
                        for (o, a) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += a * inv;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Linear(x, map) => accumulate(grads, *x, map.adjoint(g)),
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                accumulate(grads, *x, Mat::filled(r, c, g.data[0]));
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                accumulate(grads, *x, g.zip_map(y, |gi, yi| gi * 0.5 / yi.max(SQRT_FLOOR)));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep: the gradient of the output with respect to
/// every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
