//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node. Parameters are bound
//! through [`Graph::param`]; binding the same [`ParamId`] twice returns the same
//! node, so a parameter used in several places accumulates one gradient.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::params::ParamId;

pub type Matrix = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const ROW_NORM_EPS: f64 = 1e-12;
/// Probability floor applied by [`Graph::bce_mean`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Compressed sparse row matrix, used as a constant operand (adjacency,
/// multi-hot attribute tables).
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from per-row `(column, value)` lists. Columns within a
    /// row are kept in the given order.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                assert!(c < cols, "column {c} out of range for width {cols}");
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · dense`
    pub fn matmul(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.nrows(), "sparse-dense shape mismatch");
        let mut out = Matrix::zeros((self.rows, dense.ncols()));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &dense.row(c));
            }
        }
        out
    }

    /// `selfᵀ · dense`
    pub fn transpose_matmul(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.nrows(), "sparse-dense shape mismatch");
        let mut out = Matrix::zeros((self.cols, dense.ncols()));
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        out
    }

    /// Dense copy of the selected rows.
    pub fn gather_dense(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros((rows.len(), self.cols));
        for (i, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[[i, c]] += v;
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LogSigmoid(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    RowNormalize { input: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SpMM(Arc<Csr>, Var),
    SumAll(Var),
    MeanAll(Var),
    BceMean { probs: Var, targets: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated past it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Gradient-blocked copy of `v`. The copy holds the same value, but the
    /// backward pass stops at it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a trainable parameter. Repeated binds of one id share a node.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "node is not a scalar");
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, ca), "add_row shape mismatch");
        let _ = ra;
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let ca = self.value(a).ncols();
        assert_eq!(self.value(row).dim(), (1, ca), "mul_row shape mismatch");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// `ln σ(a)`, evaluated without overflow for large |a|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    /// Per-row standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    /// Scales each row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = (row.dot(&row) + ROW_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::RowNormalize { input: a, norms })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Sparse constant times dense node.
    pub fn spmm(&mut self, sparse: Arc<Csr>, a: Var) -> Var {
        let value = sparse.matmul(self.value(a));
        self.push(value, Op::SpMM(sparse, a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(value, Op::MeanAll(a))
    }

    /// Mean binary cross-entropy of probabilities against `targets`.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]`; the clamped
    /// region has zero gradient.
    pub fn bce_mean(&mut self, probs: Var, targets: Matrix) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim(), "bce shape mismatch");
        let total: f64 = p
            .iter()
            .zip(targets.iter())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = Matrix::from_elem((1, 1), total / p.len() as f64);
        self.push(value, Op::BceMean { probs, targets })
    }

    /// Mean squared error between two nodes of equal shape.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Affine map `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let drow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*row);
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = ndarray::Zip::from(&g)
                        .and(x)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Log(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Square(a) => accumulate(&mut grads, *a, &g * self.value(*a) * 2.0),
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    let da = ndarray::Zip::from(&g).and(x).map_collect(|&g, &x| g * sigmoid(-x));
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut dx = Matrix::zeros(y.dim());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let sum_g = gr.sum();
                        let sum_gy = gr.dot(&yr);
                        let mut out = dx.row_mut(r);
                        for c in 0..y.ncols() {
                            out[c] = is / n * (n * gr[c] - sum_g - yr[c] * sum_gy);
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::RowNormalize { input, norms } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.dim());
                    for (r, &n) in norms.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let dot = gr.dot(&yr);
                        let mut out = dx.row_mut(r);
                        for c in 0..y.ncols() {
                            out[c] = (gr[c] - yr[c] * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let part = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, part);
                        offset += w;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut da = Matrix::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SpMM(sparse, a) => accumulate(&mut grads, *a, sparse.transpose_matmul(&g)),
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads, *a, Matrix::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let shape = self.value(*a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    accumulate(&mut grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
                Op::BceMean { probs, targets } => {
                    let p = self.value(*probs);
                    let scale = g[[0, 0]] / p.len() as f64;
                    let dp = ndarray::Zip::from(p).and(targets).map_collect(|&p, &t| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            scale * ((1.0 - t) / (1.0 - p) - t / p)
                        }
                    });
                    accumulate(&mut grads, *probs, dp);
                }
            }
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter that received one, sorted by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Matrix)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            out[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check_unary(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(x.dim()));
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(sample(), |g, v| {
            let t = g.tanh(v);
            g.sum(t)
        });
        check_unary(sample(), |g, v| {
            let t = g.sigmoid(v);
            let s = g.square(t);
            g.mean(s)
        });
        check_unary(sample(), |g, v| {
            let t = g.exp(v);
            g.sum(t)
        });
        check_unary(sample().mapv(f64::abs), |g, v| {
            let t = g.log(v);
            g.sum(t)
        });
        check_unary(sample(), |g, v| {
            let t = g.log_sigmoid(v);
            g.sum(t)
        });
        check_unary(sample(), |g, v| {
            let t = g.relu(v);
            let s = g.scale(t, 3.0);
            g.sum(s)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let w = array![[0.5, -0.1], [0.2, 0.9], [-0.7, 0.4]];
        check_unary(sample(), move |g, v| {
            let wv = g.constant(w.clone());
            let m = g.matmul(v, wv);
            let t = g.tanh(m);
            g.sum(t)
        });
        check_unary(sample(), |g, v| {
            let t = g.transpose(v);
            let s = g.matmul(v, t);
            g.sum(s)
        });
        check_unary(sample(), |g, v| {
            let n = g.layer_norm(v);
            let c = g.constant(array![[1.0, 2.0, -3.0], [0.5, 0.1, 2.0]]);
            let m = g.mul(n, c);
            g.sum(m)
        });
        check_unary(sample(), |g, v| {
            let n = g.row_normalize(v);
            let c = g.constant(array![[1.0, 2.0, -3.0], [0.5, 0.1, 2.0]]);
            let m = g.mul(n, c);
            g.sum(m)
        });
        check_unary(sample(), |g, v| {
            let r = g.gather_rows(v, &[1, 0, 1]);
            let sq = g.square(r);
            let c = g.concat_cols(&[sq, r]);
            g.mean(c)
        });
        let csr = Arc::new(Csr::from_rows(2, &[vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![]]));
        check_unary(sample(), move |g, v| {
            let m = g.spmm(csr.clone(), v);
            let t = g.tanh(m);
            g.sum(t)
        });
        check_unary(sample(), |g, v| {
            let p = g.sigmoid(v);
            g.bce_mean(p, array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        });
    }

    #[test]
    fn broadcast_ops_accumulate_over_rows() {
        let row = array![[0.1, -0.3, 2.0]];
        check_unary(row.clone(), |g, r| {
            let a = g.constant(sample());
            let s = g.add_row(a, r);
            let t = g.mul_row(s, r);
            let q = g.square(t);
            g.sum(q)
        });
    }

    #[test]
    fn shared_param_binding_accumulates() {
        let mut store = crate::params::ParamStore::new();
        let id = store.register("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(id, store.get(id));
        let b = g.param(id, store.get(id));
        assert_eq!(a, b);
        let prod = g.mul(a, b);
        let out = g.sum(prod);
        let grads = g.backward(out);
        let pg = grads.param_grads();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1[[0, 0]], 4.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let y = g.square(x);
        let y_stop = g.detach(y);
        let z = g.mul(y_stop, x);
        let out = g.sum(z);
        let grads = g.backward(out);
        assert!(grads.wrt(y).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &array![[1.0, 4.0]]);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn csr_transpose_matmul_matches_dense() {
        let csr = Csr::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        let dense_a = csr.gather_dense(&[0, 1]);
        let b = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(csr.transpose_matmul(&b), dense_a.t().dot(&b));
        let c = array![[1.0], [2.0], [3.0]];
        assert_eq!(csr.matmul(&c), dense_a.dot(&c));
    }
}
