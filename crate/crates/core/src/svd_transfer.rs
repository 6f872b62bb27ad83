//! SVD factor transplant: keep the singular values of a stacked GhostVec
//! matrix and replace its singular vectors with those of the nearest genuine
//! speaker template.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::GhostVec;
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_atomic, write_matrix};
use crate::linalg::{compose, cosine_distance, svd, Matrix, SvdFactors};
use crate::scalar::Scalar;

/// Rows are utterance-pooled embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    pub x: Matrix<T>,
    /// Speaker token, or `ghost:<target>`.
    pub owner: String,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(x: Matrix<T>, owner: impl Into<String>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Shape("embedding matrix needs at least one row and column".into()));
        }
        if !x.is_finite() {
            return Err(Error::Input("embedding matrix has non-finite entries".into()));
        }
        Ok(Self { x, owner: owner.into() })
    }

    pub fn row_mean(&self) -> Vec<T> {
        self.x.col_mean()
    }
}

/// First `n` successful pooled GhostVecs, in input order, as rows.
pub fn stack_ghostvecs<T: Scalar>(ghosts: &[GhostVec<T>], n: usize) -> Result<EmbeddingMatrix<T>> {
    let ok: Vec<&GhostVec<T>> = ghosts.iter().filter(|g| g.provenance.success).take(n).collect();
    if ok.len() < n || n == 0 {
        return Err(Error::Insufficient { needed: n, available: ok.len() });
    }
    let dim = ok[0].pooled.len();
    let x = Matrix::from_fn(n, dim, |i, j| ok[i].pooled[j]);
    EmbeddingMatrix::new(x, format!("ghost:{}", ok[0].target_speaker))
}

/// Pick exactly `n` rows: without replacement when possible, otherwise with.
/// The selection keeps original row order.
pub fn resample_rows<T: Scalar>(x: &Matrix<T>, n: usize, rng: &mut impl Rng) -> Matrix<T> {
    let idx: Vec<usize> = if x.rows() >= n {
        let mut v = index::sample(rng, x.rows(), n).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).map(|_| rng.random_range(0..x.rows())).collect()
    };
    x.select_rows(&idx)
}

/// Genuine-speaker embedding matrices keyed by speaker token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateBank<T> {
    templates: BTreeMap<String, EmbeddingMatrix<T>>,
}

impl<T: Scalar> TemplateBank<T> {
    pub fn new() -> Self {
        Self { templates: BTreeMap::new() }
    }

    /// Insert a template resampled to `n` rows.
    pub fn insert_resampled(&mut self, speaker: &str, x: &Matrix<T>, n: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = resample_rows(x, n, &mut rng);
        self.insert(EmbeddingMatrix::new(m, speaker)?)
    }

    pub fn insert(&mut self, m: EmbeddingMatrix<T>) -> Result<()> {
        if let Some(first) = self.templates.values().next() {
            if first.x.shape() != m.x.shape() {
                return Err(Error::Shape(format!("template {:?} vs bank {:?}", m.x.shape(), first.x.shape())));
            }
        }
        self.templates.insert(m.owner.clone(), m);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, speaker: &str) -> Option<&EmbeddingMatrix<T>> {
        self.templates.get(speaker)
    }

    /// Templates in lexicographic speaker order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingMatrix<T>)> {
        self.templates.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Writes `index.tsv` (`speaker<TAB>path<TAB>rows`) and one matrix per speaker.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (spk, m) in &self.templates {
            let file = format!("{spk}.mat");
            write_matrix(&dir.join(&file), &m.x)?;
            let _ = writeln!(index, "{spk}\t{file}\t{}", m.x.rows());
        }
        write_atomic(&dir.join("index.tsv"), index.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.tsv");
        if !index_path.exists() {
            return Err(Error::DanglingReference(index_path));
        }
        let text = std::fs::read_to_string(&index_path)?;
        let mut bank = Self::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::format(&index_path, format!("line {}: expected 3 fields", n + 1)));
            }
            let rows: usize = f[2]
                .parse()
                .map_err(|_| Error::format(&index_path, format!("line {}: bad row count", n + 1)))?;
            let x: Matrix<T> = read_matrix(&dir.join(PathBuf::from(f[1])))?;
            if x.rows() != rows {
                return Err(Error::format(&index_path, format!("{}: {} rows, index says {rows}", f[0], x.rows())));
            }
            bank.insert(EmbeddingMatrix::new(x, f[0])?)?;
        }
        Ok(bank)
    }
}

/// Template whose row mean is cosine-nearest to the ghost row mean; ties go
/// to the lexicographically smaller token.
pub fn nearest_template<'b, T: Scalar>(
    ghost: &EmbeddingMatrix<T>,
    bank: &'b TemplateBank<T>,
) -> Result<(&'b str, &'b EmbeddingMatrix<T>, T)> {
    let g = ghost.row_mean();
    let mut best: Option<(&str, &EmbeddingMatrix<T>, T)> = None;
    for (spk, m) in bank.iter() {
        let d = cosine_distance(&g, &m.row_mean());
        if best.as_ref().is_none_or(|b| d < b.2) {
            best = Some((spk, m, d));
        }
    }
    best.ok_or_else(|| Error::Parameter("template bank is empty".into()))
}

/// `X' = U_template * diag(sigma_ghost) * V_template^T`.
pub fn transfer<T: Scalar>(ghost: &SvdFactors<T>, template: &SvdFactors<T>) -> Result<Matrix<T>> {
    let (n, d) = (ghost.u.rows(), ghost.v.rows());
    if template.u.shape() != (n, n) || template.v.shape() != (d, d) || template.sigma.len() != ghost.sigma.len() {
        return Err(Error::Shape(format!(
            "template factors U {:?}, V {:?} do not fit ghost {n}x{d}",
            template.u.shape(),
            template.v.shape()
        )));
    }
    Ok(compose(&template.u, &ghost.sigma, &template.v))
}

/// Row-wise mean of `X'`.
pub fn pool_speaker_embedding<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    x.col_mean()
}

/// Outcome of one target's transplant.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome<T> {
    pub target: String,
    pub template: String,
    pub distance: T,
    pub ghost_sigma: Vec<T>,
    pub modified: Matrix<T>,
}

/// Stack, decompose, pick the template, transplant.
pub fn sanitize<T: Scalar>(
    ghosts: &[GhostVec<T>],
    n: usize,
    bank: &TemplateBank<T>,
) -> Result<TransferOutcome<T>> {
    let stacked = stack_ghostvecs(ghosts, n)?;
    let target = ghosts[0].target_speaker.clone();
    let (name, tmpl, distance) = nearest_template(&stacked, bank)?;
    let gf = svd(&stacked.x)?;
    let tf = svd(&tmpl.x)?;
    let modified = transfer(&gf, &tf)?;
    Ok(TransferOutcome { target, template: name.to_string(), distance, ghost_sigma: gf.sigma, modified })
}

/// One line per target: target, template, distance, leading singular values.
pub fn transfer_report<T: Scalar>(outcomes: &[TransferOutcome<T>], head: usize) -> String {
    let mut s = String::from("target\ttemplate\tcosine_distance\tsigma_head\n");
    for o in outcomes {
        let sig: Vec<String> = o.ghost_sigma.iter().take(head).map(|v| format!("{:.6}", v.as_f64())).collect();
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", o.target, o.template, o.distance.as_f64(), sig.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_hits_exact_row_count() {
        let x = Matrix::<f64>::from_fn(5, 2, |i, _| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let down = resample_rows(&x, 3, &mut rng);
        assert_eq!(down.rows(), 3);
        let col = down.col(0);
        assert!(col.windows(2).all(|w| w[0] < w[1]), "without replacement keeps order: {col:?}");
        assert_eq!(resample_rows(&x, 9, &mut rng).rows(), 9);
    }

    #[test]
    fn empty_bank_is_an_error() {
        let g = EmbeddingMatrix::new(Matrix::<f64>::filled(1, 2, 1.0), "ghost:a").unwrap();
        assert!(nearest_template(&g, &TemplateBank::new()).is_err());
    }

    #[test]
    fn bank_rejects_mismatched_shapes() {
        let mut bank = TemplateBank::<f64>::new();
        bank.insert(EmbeddingMatrix::new(Matrix::filled(2, 3, 1.0), "a").unwrap()).unwrap();
        assert!(bank.insert(EmbeddingMatrix::new(Matrix::filled(3, 3, 1.0), "b").unwrap()).is_err());
    }

    #[test]
    fn bank_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = TemplateBank::<f32>::new();
        bank.insert(EmbeddingMatrix::new(Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f32), "t01").unwrap()).unwrap();
        bank.insert(EmbeddingMatrix::new(Matrix::filled(2, 3, 0.5), "t00").unwrap()).unwrap();
        bank.save(dir.path()).unwrap();
        assert_eq!(TemplateBank::load(dir.path()).unwrap(), bank);
    }

    #[test]
    fn transfer_rejects_dimension_mismatch() {
        let a = svd(&Matrix::<f64>::identity(3)).unwrap();
        let b = svd(&Matrix::<f64>::identity(2)).unwrap();
        assert!(matches!(transfer(&a, &b), Err(Error::Shape(_))));
    }
}
