//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with respect
//! to every recorded node, including the model input. The op set is exactly
//! what the recognizer and the verification encoder need.

use crate::linalg::{gemm_into, Matrix};
use crate::scalar::Scalar;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mask(Var, Matrix<T>),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Softmax(Var),
    Reshape(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    CrossEntropy { logits: Var, probs: Matrix<T>, targets: Vec<usize>, weights: Vec<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` for nodes the root does not depend on.
pub struct Gradients<T>(Vec<Option<Matrix<T>>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.0[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b)).expect("matmul_bt shapes");
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.len(), "add_row width");
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Broadcast multiply every row of `a` by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.len(), "mul_row width");
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Matrix<T>) -> Var {
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, Op::Mask(a, mask))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of_usize(cols);
        let eps = T::of(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (h, &v) in xhat.row_mut(i).iter_mut().zip(r) {
                *h = (v - mean) * is;
            }
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, &gg), &bb) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row-wise softmax; with `causal`, entries right of the diagonal get zero mass.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows() {
            let limit = if causal { (i + 1).min(out.cols()) } else { out.cols() };
            let row = out.row_mut(i);
            softmax_in_place(&mut row[..limit]);
            for x in row[limit..].iter_mut() {
                *x = T::zero();
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols).expect("reshape size");
        self.push(out, Op::Reshape(a))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let out = Matrix::from_fn(av.rows(), len, |i, j| av[(i, start + j)]);
        self.push(out, Op::ColSlice(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols rows");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Select rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        self.push(out, Op::Gather(table, idx.to_vec()))
    }

    /// Column-wise mean, giving a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = Matrix::row_vector(&self.value(a).col_mean());
        self.push(out, Op::MeanRows(a))
    }

    /// Weighted token cross-entropy `sum_i w_i * -ln softmax(logits_i)[t_i]` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        assert_eq!(lv.rows(), weights.len(), "one weight per row");
        let mut probs = lv.clone();
        let mut total = T::zero();
        for i in 0..probs.rows() {
            let row = probs.row_mut(i);
            softmax_in_place(row);
            if weights[i] != T::zero() {
                let logz = log_sum_exp(lv.row(i));
                total += weights[i] * (logz - lv[(i, targets[i])]);
            }
        }
        let out = Matrix::filled(1, 1, total);
        self.push(
            out,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Gradient of the `1 x 1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm_into(&g, false, bv, true, &mut ga, T::zero());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, &g, false, &mut gb, T::zero());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm_into(&g, false, bv, false, &mut ga, T::zero());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_into(&g, true, av, false, &mut gb, T::zero());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let gr = Matrix::row_vector(&col_sum(&g));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row).as_slice();
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = vec![T::zero(); r.len()];
                    for i in 0..g.rows() {
                        for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                            gr[j] += *x * av[(i, j)];
                            *x *= r[j];
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::row_vector(&gr));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mask(a, m) => {
                    accumulate(&mut grads, *a, g.zip_map(m, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scale(*c));
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma).as_slice();
                    let (rows, cols) = g.shape();
                    let n = T::of_usize(cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut ggamma = vec![T::zero(); cols];
                    let mut gbeta = vec![T::zero(); cols];
                    let mut dxhat = vec![T::zero(); cols];
                    for i in 0..rows {
                        let (gr, hr) = (g.row(i), xhat.row(i));
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..cols {
                            ggamma[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let k = inv_std[i] / n;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = k * (n * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                    accumulate(&mut grads, *gamma, Matrix::row_vector(&ggamma));
                    accumulate(&mut grads, *beta, Matrix::row_vector(&gbeta));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let (pr, gr) = (p.row(i), g.row(i));
                        let s: T = pr.iter().zip(gr).map(|(&pp, &gg)| pp * gg).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = pr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshape(r, c).expect("reshape back"));
                }
                Op::ColSlice(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |i, j| g[(i, off + j)]);
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Gather(table, idx) => {
                    let (r, c) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(r, c);
                    for (k, &row) in idx.iter().enumerate() {
                        for (o, &x) in gt.row_mut(row).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let inv = T::one() / T::of_usize(r.max(1));
                    let ga = Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, probs, targets, weights } => {
                    let up = g[(0, 0)];
                    let mut gl = probs.clone();
                    for i in 0..gl.rows() {
                        let w = weights[i] * up;
                        let row = gl.row_mut(i);
                        if weights[i] == T::zero() {
                            row.iter_mut().for_each(|x| *x = T::zero());
                            continue;
                        }
                        row[targets[i]] -= T::one();
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Gradients(grads)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); m.cols()];
    for r in m.iter_rows() {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += x;
        }
    }
    acc
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

// tanh approximation of GELU
fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(root)/d(input) for a small graph builder.
    fn check_grad(
        input: Matrix<f64>,
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let root = build(&mut tape, x);
        let grads = tape.backward(root);
        let g = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let h = 1e-5;
        for i in 0..input.rows() {
            for j in 0..input.cols() {
                let eval = |d: f64| {
                    let mut m = input.clone();
                    m[(i, j)] += d;
                    let mut t = Tape::new();
                    let x = t.leaf(m);
                    let r = build(&mut t, x);
                    t.value(r)[(0, 0)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[(i, j)]).abs() / fd.abs().max(g[(i, j)].abs()).max(1e-6);
                assert!(err < 1e-5, "({i},{j}) analytic {} vs fd {fd}", g[(i, j)]);
            }
        }
    }

    fn sample(r: usize, c: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn attention_block_gradient() {
        check_grad(sample(4, 6, 0.3), |t, x| {
            let w = t.leaf(sample(6, 6, 1.1));
            let q = t.matmul(x, w);
            let s = t.matmul_bt(q, x);
            let s = t.scale(s, 0.4);
            let p = t.softmax(s, true);
            let o = t.matmul(p, x);
            let g = t.leaf(sample(1, 6, 2.0));
            let b = t.leaf(sample(1, 6, 0.7));
            let n = t.layer_norm(o, g, b);
            let a = t.gelu(n);
            let l = t.leaf(sample(6, 5, 0.2));
            let logits = t.matmul(a, l);
            t.cross_entropy(logits, &[0, 3, 4, 1], &[0.25, 0.0, 0.5, 0.25])
        });
    }

    #[test]
    fn reshape_slice_concat_gradient() {
        check_grad(sample(4, 4, 0.9), |t, x| {
            let r = t.reshape(x, 2, 8);
            let a = t.col_slice(r, 1, 3);
            let b = t.col_slice(r, 5, 3);
            let c = t.concat_cols(&[b, a]);
            let row = t.leaf(sample(1, 6, 0.1));
            let c = t.mul_row(c, row);
            let c = t.add_row(c, row);
            let m = t.mean_rows(c);
            let w = t.leaf(sample(6, 3, 0.5));
            let logits = t.matmul(m, w);
            t.cross_entropy(logits, &[2], &[1.0])
        });
    }

    #[test]
    fn gather_gradient_accumulates_repeats() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(sample(3, 2, 0.0));
        let rows = tape.gather(table, &[1, 1, 2]);
        let w = tape.leaf(sample(2, 2, 0.4));
        let logits = tape.matmul(rows, w);
        let loss = tape.cross_entropy(logits, &[0, 1, 0], &[1.0, 1.0, 1.0]);
        let g = tape.backward(loss);
        let gt = g.get(table).unwrap();
        assert_eq!(gt.row(0), &[0.0, 0.0]);
        assert!(gt.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Matrix::zeros(3, 7));
        let loss = tape.cross_entropy(logits, &[0, 1, 2], &[1.0 / 3.0; 3]);
        assert!((tape.value(loss)[(0, 0)] - 7f64.ln()).abs() < 1e-12);
    }
}
