//! GhostVec extraction: iterative gradient-sign search on a noise input until
//! the frozen recognizer's first decoded token is the target speaker, then
//! harvest of the encoder output.
//!
//! Sign convention: each step is a descent step on the cross-entropy of the
//! target speaker token, `x <- x - eps * sign(dJ/dx)`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asr::model::{argmax, encode, grad_input, AsrModel, Graph, PositionMask};
use crate::asr::vocab::{LabelSequence, EOS, SOS};
use crate::corpus::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::io::{read_matrix_block, write_atomic, write_matrix_block};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Gaussian "empty audio" in feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// One value per feature column, or a single value broadcast to all.
    pub mean: Vec<f64>,
    pub std: f64,
}

impl NoiseSpec {
    pub fn scalar(mean: f64, std: f64) -> Self {
        Self { mean: vec![mean], std }
    }

    fn mean_at(&self, col: usize) -> f64 {
        if self.mean.len() == 1 {
            self.mean[0]
        } else {
            self.mean[col]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Per-step L-infinity magnitude.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Input frames `T` of the perturbed feature matrix.
    pub frames: usize,
    pub noise: NoiseSpec,
    /// Optional cumulative L-infinity bound around the initial noise.
    pub budget: Option<f64>,
    pub seed: u64,
    /// Ablation: loss over the whole `<SOS> spk <EOS>` label instead of the speaker slot only.
    pub full_sequence_loss: bool,
    /// Keep the full `T' x D` encoder output of each variant.
    pub keep_embeddings: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            max_iters: 100,
            frames: 64,
            noise: NoiseSpec::scalar(0.0, 1.0),
            budget: None,
            seed: 1,
            full_sequence_loss: false,
            keep_embeddings: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Parameter("max_iters must be at least 1".into()));
        }
        if self.frames < crate::asr::model::SUBSAMPLING {
            return Err(Error::Parameter(format!("frames {} below encoder minimum", self.frames)));
        }
        if !(self.noise.std >= 0.0) || !(self.noise.mean.len() == 1 || self.noise.mean.len() == FEATURE_DIM) {
            return Err(Error::Parameter("noise spec needs std >= 0 and 1 or 120 means".into()));
        }
        if let Some(b) = self.budget {
            if !(b > 0.0) {
                return Err(Error::Parameter(format!("budget must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// Stable digest of the settings that shape the result.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::io::digest_bytes(&json)[..16].to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub iters_used: usize,
    pub final_loss: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostVec<T> {
    /// Full encoder output, when kept.
    pub embedding: Option<Matrix<T>>,
    /// Time mean of the encoder output.
    pub pooled: Vec<T>,
    pub target_speaker: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    pub ghostvecs: Vec<GhostVec<T>>,
    pub success_rate: f64,
}

fn variant_rng(seed: u64, variant: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variant);
    rng
}

/// `T x 120` Gaussian draw; deterministic for `(cfg.seed, variant)`.
pub fn init_input<T: Scalar>(cfg: &AttackConfig, variant: u64) -> Matrix<T> {
    let mut rng = variant_rng(cfg.seed, variant);
    let std = cfg.noise.std;
    let normal = Normal::new(0.0, std.max(0.0)).expect("valid std");
    Matrix::from_fn(cfg.frames, FEATURE_DIM, |_, j| {
        let z = if std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        T::of(cfg.noise.mean_at(j) + z)
    })
}

/// `x - eps * sign(grad)` with `sign(0) = 0`.
pub fn fgsm_step<T: Scalar>(x: &Matrix<T>, grad: &Matrix<T>, epsilon: T) -> Result<Matrix<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!("input {:?} vs gradient {:?}", x.shape(), grad.shape())));
    }
    Ok(x.zip_map(grad, |xi, g| {
        if g > T::zero() {
            xi - epsilon
        } else if g < T::zero() {
            xi + epsilon
        } else {
            xi
        }
    }))
}

/// One forward/backward pass: step-1 posterior, speaker-slot loss, `dJ/dx`.
pub fn speaker_step<T: Scalar>(model: &AsrModel<T>, x: &Matrix<T>, target: usize) -> Result<(Vec<T>, T, Matrix<T>)> {
    type R = ChaCha8Rng;
    let mut g = Graph::new(model);
    let xv = g.input(x)?;
    let h = g.encode::<R>(xv, None);
    let logits = g.decode::<R>(h, &[SOS], None);
    let mut post = g.tape.value(logits).row(0).to_vec();
    crate::autodiff::softmax_in_place(&mut post);
    let l = g.tape.cross_entropy(logits, &[target], &[T::one()]);
    let lv = g.tape.value(l)[(0, 0)];
    let mut grads = g.tape.backward(l);
    let mut full = Matrix::zeros(x.rows(), x.cols());
    if let Some(gx) = grads.take(xv) {
        for i in 0..gx.rows() {
            full.row_mut(i).copy_from_slice(gx.row(i));
        }
    }
    Ok((post, lv, full))
}

fn project<T: Scalar>(x: &mut Matrix<T>, origin: &Matrix<T>, budget: T) {
    for (v, &o) in x.as_mut_slice().iter_mut().zip(origin.as_slice()) {
        *v = v.max(o - budget).min(o + budget);
    }
}

/// Run one variant; returns the final input and its provenance.
pub fn attack_variant<T: Scalar>(
    model: &AsrModel<T>,
    target: usize,
    cfg: &AttackConfig,
    variant: u64,
) -> Result<(Matrix<T>, Provenance)> {
    let x0: Matrix<T> = init_input(cfg, variant);
    let mut x = x0.clone();
    let eps = T::of(cfg.epsilon);
    let label = LabelSequence { tokens: vec![SOS, target, EOS] };
    for k in 0..=cfg.max_iters {
        let (post, loss, grad) = speaker_step(model, &x, target)?;
        if argmax(&post) == target {
            return Ok((x, Provenance { iters_used: k, final_loss: loss.as_f64(), success: true }));
        }
        if k == cfg.max_iters {
            return Ok((x, Provenance { iters_used: k, final_loss: loss.as_f64(), success: false }));
        }
        let grad = if cfg.full_sequence_loss {
            grad_input(model, &x, &label, &PositionMask::All)?.1
        } else {
            grad
        };
        x = fgsm_step(&x, &grad, eps)?;
        if let Some(b) = cfg.budget {
            project(&mut x, &x0, T::of(b));
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Extract `n_variants` GhostVecs for `target` from a frozen model.
pub fn extract_ghostvec<T: Scalar>(
    model: &AsrModel<T>,
    target: &str,
    cfg: &AttackConfig,
    n_variants: usize,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(Error::Parameter("the attacked model must be frozen".into()));
    }
    let tok = model
        .vocab()
        .speaker_token(target)
        .ok_or_else(|| Error::Parameter(format!("target {target} is not a speaker token")))?;
    let mut ghostvecs = Vec::with_capacity(n_variants);
    for v in 0..n_variants as u64 {
        let (x, provenance) = attack_variant(model, tok, cfg, v)?;
        let emb = encode(model, &x)?;
        ghostvecs.push(GhostVec {
            pooled: emb.col_mean(),
            embedding: cfg.keep_embeddings.then_some(emb),
            target_speaker: target.to_string(),
            provenance,
        });
    }
    let successes = ghostvecs.iter().filter(|g| g.provenance.success).count();
    let success_rate = if n_variants == 0 { 0.0 } else { successes as f64 / n_variants as f64 };
    Ok(AttackResult { ghostvecs, success_rate })
}

const BUNDLE_MAGIC: &str = "ghostvec-bundle v1";

/// Bundle header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleHeader {
    pub target: String,
    pub dim: usize,
    pub count: usize,
    pub config_digest: String,
    pub full: bool,
}

/// Write a per-target bundle: header, pooled matrix, provenance matrix
/// (`iters, loss, success`), then optional full embeddings.
pub fn save_bundle<T: Scalar>(path: &Path, ghosts: &[GhostVec<T>], target: &str, config_digest: &str) -> Result<()> {
    let dim = ghosts.first().map_or(0, |g| g.pooled.len());
    let full = !ghosts.is_empty() && ghosts.iter().all(|g| g.embedding.is_some());
    let mut buf = Vec::new();
    let mut head = String::new();
    let _ = writeln!(head, "{BUNDLE_MAGIC}");
    let _ = writeln!(
        head,
        "target={target} dim={dim} count={} config={config_digest} full={}",
        ghosts.len(),
        u8::from(full)
    );
    buf.write_all(head.as_bytes())?;
    let pooled = Matrix::from_fn(ghosts.len(), dim, |i, j| ghosts[i].pooled[j]);
    write_matrix_block(&mut buf, &pooled)?;
    let prov = Matrix::<f64>::from_fn(ghosts.len(), 3, |i, j| {
        let p = &ghosts[i].provenance;
        match j {
            0 => p.iters_used as f64,
            1 => p.final_loss,
            _ => f64::from(u8::from(p.success)),
        }
    });
    write_matrix_block(&mut buf, &prov)?;
    if full {
        for g in ghosts {
            write_matrix_block(&mut buf, g.embedding.as_ref().expect("checked above"))?;
        }
    }
    write_atomic(path, &buf)
}

pub fn load_bundle<T: Scalar>(path: &Path) -> Result<(BundleHeader, Vec<GhostVec<T>>)> {
    if !path.exists() {
        return Err(Error::DanglingReference(path.to_path_buf()));
    }
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != BUNDLE_MAGIC {
        return Err(Error::format(path, "not a ghostvec bundle"));
    }
    line.clear();
    r.read_line(&mut line)?;
    let field = |key: &str| -> Result<String> {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
            .map(str::to_string)
            .ok_or_else(|| Error::format(path, format!("missing header field {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        field(key)?.parse().map_err(|_| Error::format(path, format!("bad header field {key}")))
    };
    let header = BundleHeader {
        target: field("target")?,
        dim: num("dim")?,
        count: num("count")?,
        config_digest: field("config")?,
        full: field("full")? == "1",
    };
    let pooled: Matrix<T> = read_matrix_block(&mut r, path)?;
    let prov: Matrix<f64> = read_matrix_block(&mut r, path)?;
    if pooled.rows() != header.count || prov.rows() != header.count {
        return Err(Error::format(path, "row count disagrees with header"));
    }
    let mut out = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let embedding = if header.full { Some(read_matrix_block(&mut r, path)?) } else { None };
        out.push(GhostVec {
            embedding,
            pooled: pooled.row(i).to_vec(),
            target_speaker: header.target.clone(),
            provenance: Provenance {
                iters_used: prov[(i, 0)] as usize,
                final_loss: prov[(i, 1)],
                success: prov[(i, 2)] != 0.0,
            },
        });
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_silent_matrix() {
        let cfg = AttackConfig { noise: NoiseSpec::scalar(-4.0, 0.0), frames: 6, ..Default::default() };
        let x: Matrix<f64> = init_input(&cfg, 0);
        assert!(x.as_slice().iter().all(|&v| v == -4.0));
    }

    #[test]
    fn init_is_deterministic_per_variant() {
        let cfg = AttackConfig { frames: 8, ..Default::default() };
        let a: Matrix<f32> = init_input(&cfg, 3);
        let b: Matrix<f32> = init_input(&cfg, 3);
        let c: Matrix<f32> = init_input(&cfg, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_moments_match_spec() {
        let cfg = AttackConfig { frames: 200, noise: NoiseSpec::scalar(-5.0, 1.5), seed: 11, ..Default::default() };
        let x: Matrix<f64> = init_input(&cfg, 0);
        let n = x.as_slice().len() as f64;
        let mean = x.as_slice().iter().sum::<f64>() / n;
        let std = (x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - -5.0).abs() <= 0.05 * 5.0, "mean {mean}");
        assert!((std - 1.5).abs() <= 0.05 * 1.5, "std {std}");
    }

    #[test]
    fn fgsm_zero_gradient_is_identity_and_steps_are_exact() {
        let x = Matrix::<f64>::from_fn(3, 4, |i, j| (i + j) as f64 * 0.1);
        assert_eq!(fgsm_step(&x, &Matrix::zeros(3, 4), 0.2).unwrap(), x);
        let g = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.5);
        let y = fgsm_step(&x, &g, 0.2).unwrap();
        for (i, j) in (0..3).flat_map(|i| (0..4).map(move |j| (i, j))) {
            let d = (y[(i, j)] - x[(i, j)]).abs();
            if g[(i, j)] == 0.0 {
                assert_eq!(d, 0.0);
            } else {
                assert!((d - 0.2).abs() < 1e-15);
            }
        }
        assert!(fgsm_step(&x, &Matrix::zeros(2, 4), 0.2).is_err());
    }

    /// Two-parameter logistic model: J = ln(1 + exp(-(w . x))) with w fixed.
    /// dJ/dx = -sigmoid(-(w . x)) * w, so the step moves x by +eps * sign(w).
    #[test]
    fn fgsm_on_linear_toy_matches_closed_form() {
        let w = [2.0f64, -3.0];
        let x = Matrix::row_vector(&[0.5f64, 0.25]);
        let z: f64 = w[0] * 0.5 + w[1] * 0.25;
        let s = 1.0 / (1.0 + z.exp());
        let grad = Matrix::row_vector(&[-s * w[0], -s * w[1]]);
        let y = fgsm_step(&x, &grad, 0.1).unwrap();
        assert!((y[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((y[(0, 1)] - 0.15).abs() < 1e-15);
        let z_after = w[0] * y[(0, 0)] + w[1] * y[(0, 1)];
        assert!(z_after > z, "descent on J raises the target margin");
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            AttackConfig { epsilon: 0.0, ..Default::default() },
            AttackConfig { max_iters: 0, ..Default::default() },
            AttackConfig { frames: 1, ..Default::default() },
            AttackConfig { budget: Some(-1.0), ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        }
    }
}
