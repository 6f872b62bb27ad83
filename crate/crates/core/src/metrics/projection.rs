//! Variance-maximizing 2-D linear projection for cluster reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projected {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Top-2 principal directions of the centered data, each signed so its
/// largest-magnitude coordinate is positive. Returned as `D x 2`.
pub fn principal_directions(data: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::Insufficient { needed: 2, available: n });
    }
    let mean = data.col_mean();
    let centered = Matrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let f = svd(&cov)?;
    if !(f.sigma[0] > 1e-300) {
        return Err(Error::Degenerate("all vectors identical: no variance to project".into()));
    }
    let mut dirs = Matrix::zeros(d, 2);
    for k in 0..2.min(d) {
        let col = f.v.col(k);
        let lead = col.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
        let s = if lead < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in col.iter().enumerate() {
            dirs[(j, k)] = s * v;
        }
    }
    Ok(dirs)
}

pub fn project_2d(embeddings: &[(String, Vec<f64>)]) -> Result<Vec<Projected>> {
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|(_, v)| v.clone()).collect();
    if rows.len() < 2 {
        return Err(Error::Insufficient { needed: 2, available: rows.len() });
    }
    let data = Matrix::from_rows(&rows)?;
    let dirs = principal_directions(&data)?;
    let mean = data.col_mean();
    let centered = Matrix::from_fn(data.rows(), data.cols(), |i, j| data[(i, j)] - mean[j]);
    let p = centered.matmul(&dirs)?;
    Ok(embeddings
        .iter()
        .enumerate()
        .map(|(i, (label, _))| Projected { label: label.clone(), x: p[(i, 0)], y: p[(i, 1)] })
        .collect())
}
