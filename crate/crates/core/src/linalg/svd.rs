//! Full singular value decomposition by one-sided Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the input directly, so the
//! singular values come out with high relative accuracy and the right factor
//! accumulates as a product of plane rotations. Left singular vectors for
//! zero singular values and for the `m - n` surplus dimensions are completed
//! by Gram-Schmidt against the standard basis, which gives the full square
//! factors required for factor transplant.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// `X = U diag(sigma) V^T` with square orthogonal `U` (m x m) and `V` (n x n).
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T> {
    pub u: Matrix<T>,
    /// Length `min(m, n)`, nonnegative, descending.
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdFactors<T> {
    /// Rebuild `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix<T> {
        compose(&self.u, &self.sigma, &self.v)
    }
}

/// `U diag(sigma) V^T` for square `U` (m x m) and `V` (n x n).
pub fn compose<T: Scalar>(u: &Matrix<T>, sigma: &[T], v: &Matrix<T>) -> Matrix<T> {
    let (m, n) = (u.rows(), v.rows());
    let k = sigma.len().min(m).min(n);
    let mut scaled = Matrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            scaled[(i, j)] = u[(i, j)] * sigma[j];
        }
    }
    let vk = Matrix::from_fn(n, k, |i, j| v[(i, j)]);
    scaled.matmul_t(&vk).expect("compose shapes agree")
}

pub fn svd<T: Scalar>(x: &Matrix<T>) -> Result<SvdFactors<T>> {
    if !x.is_finite() {
        return Err(Error::Input("svd input contains non-finite entries".into()));
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Shape(format!("svd of empty {}x{} matrix", x.rows(), x.cols())));
    }
    if x.rows() >= x.cols() {
        Ok(svd_tall(x))
    } else {
        let f = svd_tall(&x.transpose());
        Ok(SvdFactors { u: f.v, sigma: f.sigma, v: f.u })
    }
}

fn svd_tall<T: Scalar>(x: &Matrix<T>) -> SvdFactors<T> {
    let (m, n) = x.shape();
    // Columns of X and V stored as contiguous rows.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| x.col(j)).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for i in 0..m {
                        alpha += a[i] * a[i];
                        beta += b[i] * b[i];
                        gamma += a[i] * b[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sig: Vec<(T, usize)> = cols.iter().enumerate().map(|(j, c)| (norm(c), j)).collect();
    sig.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite norms").then(a.1.cmp(&b.1)));
    let sigma_max = sig.first().map_or(T::zero(), |s| s.0);
    let cutoff = sigma_max * eps * T::of_usize(m.max(n));

    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    let mut pending = Vec::new();
    for (k, &(s, j)) in sig.iter().enumerate() {
        sigma.push(s);
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
        if s > cutoff && s > T::zero() {
            ucols.push(cols[j].iter().map(|&a| a / s).collect());
        } else {
            pending.push(k);
            ucols.push(Vec::new());
        }
    }
    // Fill in left vectors for numerically-zero singular values, then the surplus.
    let mut basis_idx = 0;
    let mut slots: Vec<usize> = pending;
    slots.extend(n..m);
    ucols.resize(m, Vec::new());
    for slot in slots {
        loop {
            assert!(basis_idx < m, "basis completion exhausted");
            let mut cand: Vec<T> = (0..m).map(|i| if i == basis_idx { T::one() } else { T::zero() }).collect();
            basis_idx += 1;
            for _ in 0..2 {
                for (k, u) in ucols.iter().enumerate() {
                    if u.is_empty() || k == slot {
                        continue;
                    }
                    let d = dot(&cand, u);
                    for (c, &ui) in cand.iter_mut().zip(u) {
                        *c -= d * ui;
                    }
                }
            }
            let nc = norm(&cand);
            if nc > T::of(0.25) {
                ucols[slot] = cand.into_iter().map(|c| c / nc).collect();
                break;
            }
        }
    }
    let u = Matrix::from_fn(m, m, |i, j| ucols[j][i]);
    SvdFactors { u, sigma, v }
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Largest absolute deviation of `Q^T Q` from the identity.
pub fn orthogonality_error<T: Scalar>(q: &Matrix<T>) -> T {
    let g = q.t_matmul(q).expect("square product");
    let n = g.rows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Relative Frobenius reconstruction error `|U S V^T - X| / max(|X|, 1e-12)`.
pub fn reconstruction_error<T: Scalar>(x: &Matrix<T>, f: &SvdFactors<T>) -> T {
    let r = f.reconstruct();
    let diff = r.sub(x).expect("reconstruction shape");
    diff.frobenius() / x.frobenius().max(T::of(1e-12))
}
