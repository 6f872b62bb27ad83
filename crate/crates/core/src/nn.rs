//! Parameter storage, layer wiring on a [`Tape`], and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn get(&self, idx: usize) -> &Matrix<T> {
        &self.tensors[idx]
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    fn push(&mut self, name: String, m: Matrix<T>) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Matrix::cast).collect() }
    }

    /// Replace tensors wholesale, keeping names; shapes must match.
    pub(crate) fn replace(&mut self, tensors: Vec<Matrix<T>>) -> Option<()> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return None;
        }
        self.tensors = tensors;
        Some(())
    }

    /// SHA-256 over the `f32` image of every tensor, in order.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.scalar_count() * 4);
        for (n, t) in self.names.iter().zip(&self.tensors) {
            bytes.extend_from_slice(n.as_bytes());
            for &x in t.as_slice() {
                bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        crate::io::digest_bytes(&bytes)
    }
}

/// Deterministic parameter initialization.
pub struct Builder<'r, T, R> {
    pub params: ParamSet<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { params: ParamSet::default(), rng }
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let m = Matrix::from_fn(fan_in, fan_out, |_, _| T::of(dist.sample(self.rng)));
        self.params.push(name.into(), m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let m = Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(self.rng)));
        self.params.push(name.into(), m)
    }

    pub fn constant(&mut self, name: &str, cols: usize, value: f64) -> usize {
        self.params.push(name.into(), Matrix::filled(1, cols, T::of(value)))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.xavier(&format!("{name}.w"), d_in, d_out),
            b: self.constant(&format!("{name}.b"), d_out, 0.0),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(&format!("{name}.gain"), d, 1.0),
            bias: self.constant(&format!("{name}.bias"), d, 0.0),
        }
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Bound<'p, T> {
    params: &'p ParamSet<T>,
    vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, vars: vec![None; params.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape<T>, idx: usize) -> Var {
        *self.vars[idx].get_or_insert_with(|| tape.leaf(self.params.tensors[idx].clone()))
    }

    /// Per-parameter gradients (zeros for unused parameters).
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Matrix<T>> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| {
                v.and_then(|v| grads.take(v)).unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Bound<'_, T>, x: Var) -> Var {
        let w = p.var(tape, self.w);
        let b = p.var(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Bound<'_, T>, x: Var) -> Var {
        let g = p.var(tape, self.gain);
        let b = p.var(tape, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Inverted dropout on `x` when `rng` is present and `rate > 0`.
pub fn dropout<T: Scalar, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = tape.value(x).shape();
            let keep = T::of(1.0 / (1.0 - rate));
            let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { T::zero() } else { keep });
            tape.mask(x, mask)
        }
        _ => x,
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Matrix<T> {
    Matrix::from_fn(len, dim, |pos, i| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = pos as f64 * rate;
        T::of(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Cosine decay towards `lr * 0.05` over the run, once its length is set.
    pub cosine_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 5.0, warmup_steps: 100, cosine_decay: false }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: usize,
    total_steps: Option<usize>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { cfg, m: zeros(), v: zeros(), step: 0, total_steps: None }
    }

    pub fn set_total_steps(&mut self, total: usize) {
        self.total_steps = Some(total);
    }

    fn decay(&self) -> f64 {
        match self.total_steps {
            Some(total) if self.cfg.cosine_decay && total > self.cfg.warmup_steps => {
                let span = (total - self.cfg.warmup_steps) as f64;
                let done = (self.step.saturating_sub(self.cfg.warmup_steps) as f64 / span).min(1.0);
                0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * done).cos())
            }
            _ => 1.0,
        }
    }

    /// Apply one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &mut [Matrix<T>]) -> f64 {
        self.step += 1;
        let gnorm = grads.iter().map(|g| g.as_slice().iter().map(|x| x.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        if self.cfg.clip_norm > 0.0 && gnorm > self.cfg.clip_norm {
            let s = T::of(self.cfg.clip_norm / gnorm);
            for g in grads.iter_mut() {
                g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
        }
        let warm = if self.cfg.warmup_steps > 0 {
            (self.step as f64 / self.cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = self.cfg.lr * warm * self.decay();
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(lr * c2.sqrt() / c1);
        let (tb1, tb2, eps) = (T::of(b1), T::of(b2), T::of(self.cfg.eps));
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut())
                .zip(v.as_mut_slice().iter_mut())
            {
                *mi = tb1 * *mi + (T::one() - tb1) * gi;
                *vi = tb2 * *vi + (T::one() - tb2) * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() + eps);
            }
        }
        gnorm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::<f64, _>::new(&mut rng);
        let lin = b.linear("l", 2, 1);
        let mut params = b.params;
        let mut opt = Adam::new(AdamConfig { lr: 0.05, warmup_steps: 0, ..Default::default() }, &params);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let y = [2.0, -1.0, 1.0];
        for _ in 0..600 {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&params);
            let xv = tape.leaf(x.clone());
            let out = lin.apply(&mut tape, &mut bound, xv);
            // squared error through a softmax-free path: use logits of a 2-class CE
            let neg = tape.scale(out, -1.0);
            let logits = tape.concat_cols(&[out, neg]);
            let targets: Vec<usize> = y.iter().map(|&v: &f64| if v > 0.0 { 0 } else { 1 }).collect();
            let loss = tape.cross_entropy(logits, &targets, &[1.0 / 3.0; 3]);
            let mut g = tape.backward(loss);
            let mut grads = bound.collect(&mut g);
            opt.update(&mut params, &mut grads);
        }
        let w = params.get(lin.w);
        assert!(w[(0, 0)] > 0.0 && w[(1, 0)] < 0.0);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::<f32, _>::new(&mut rng);
        b.linear("a", 3, 3);
        let p = b.params;
        let mut q = p.clone();
        assert_eq!(p.checksum(), q.checksum());
        let first = q.names()[0].clone();
        q.by_name_mut(&first).unwrap()[(0, 0)] += 1.0;
        assert_ne!(p.checksum(), q.checksum());
    }
}
