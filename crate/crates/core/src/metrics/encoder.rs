//! Small utterance-level speaker encoder: a frame-wise MLP, mean pooling over
//! time, a linear embedding layer and a speaker classifier used only in
//! training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::model::FeatureNorm;
use crate::autodiff::{Tape, Var};
use crate::corpus::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Adam, AdamConfig, Bound, Builder, Linear, ParamSet};
use crate::scalar::Scalar;

const VERSION: &str = "sv-encoder-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed_dim: 32,
            epochs: 12,
            batch_size: 16,
            seed: 1,
            optimizer: AdamConfig { lr: 2e-3, warmup_steps: 50, ..AdamConfig::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    frame1: Linear,
    frame2: Linear,
    embed: Linear,
    classify: Linear,
}

impl Layout {
    fn build<T: Scalar>(cfg: &SvConfig, n_speakers: usize, seed: u64) -> (Self, ParamSet<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T, _>::new(&mut rng);
        let layout = Self {
            frame1: b.linear("frame1", FEATURE_DIM, cfg.hidden),
            frame2: b.linear("frame2", cfg.hidden, cfg.hidden),
            embed: b.linear("embed", cfg.hidden, cfg.embed_dim),
            classify: b.linear("classify", cfg.embed_dim, n_speakers),
        };
        (layout, b.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoder<T> {
    config: SvConfig,
    speakers: Vec<String>,
    norm: FeatureNorm,
    layout: Layout,
    params: ParamSet<T>,
}

/// Labelled utterance for encoder training.
#[derive(Clone, Debug)]
pub struct SvExample<T> {
    pub features: Matrix<T>,
    pub speaker: usize,
}

impl<T: Scalar> SpeakerEncoder<T> {
    pub fn config(&self) -> &SvConfig {
        &self.config
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn forward(&self, tape: &mut Tape<T>, bound: &mut Bound<'_, T>, x: &Matrix<T>) -> Result<(Var, Var)> {
        if x.cols() != FEATURE_DIM || x.rows() == 0 {
            return Err(Error::Shape(format!("speaker encoder input {:?}", x.shape())));
        }
        let shift: Vec<T> = self.norm.mean.iter().map(|&m| T::of(-m)).collect();
        let scale: Vec<T> = self.norm.inv_std.iter().map(|&s| T::of(s)).collect();
        let xv = tape.leaf(x.clone());
        let sv = tape.leaf(Matrix::row_vector(&shift));
        let kv = tape.leaf(Matrix::row_vector(&scale));
        let z = tape.add_row(xv, sv);
        let z = tape.mul_row(z, kv);
        let h = self.layout.frame1.apply(tape, bound, z);
        let h = tape.gelu(h);
        let h = self.layout.frame2.apply(tape, bound, h);
        let h = tape.gelu(h);
        let pooled = tape.mean_rows(h);
        let e = self.layout.embed.apply(tape, bound, pooled);
        let logits = self.layout.classify.apply(tape, bound, e);
        Ok((e, logits))
    }

    /// Utterance embedding.
    pub fn embed(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let (e, _) = self.forward(&mut tape, &mut bound, x)?;
        Ok(tape.value(e).row(0).to_vec())
    }

    /// Closed-set speaker index.
    pub fn classify(&self, x: &Matrix<T>) -> Result<usize> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let (_, logits) = self.forward(&mut tape, &mut bound, x)?;
        Ok(crate::asr::model::argmax(tape.value(logits).row(0)))
    }

    pub fn accuracy(&self, examples: &[SvExample<T>]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for ex in examples {
            hits += usize::from(self.classify(&ex.features)? == ex.speaker);
        }
        Ok(hits as f64 / examples.len() as f64)
    }
}

/// Train with cross-entropy over speakers; returns the encoder and its
/// closed-set training accuracy.
pub fn train_speaker_encoder<T: Scalar>(
    examples: &[SvExample<T>],
    speakers: Vec<String>,
    cfg: &SvConfig,
) -> Result<(SpeakerEncoder<T>, f64)> {
    if speakers.len() < 2 {
        return Err(Error::Parameter(format!("need at least 2 speakers, got {}", speakers.len())));
    }
    if examples.is_empty() || cfg.batch_size == 0 || cfg.hidden == 0 || cfg.embed_dim == 0 {
        return Err(Error::Parameter("empty training set or zero-sized encoder".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.speaker >= speakers.len()) {
        return Err(Error::Parameter(format!("speaker index {} out of range", ex.speaker)));
    }
    let norm = FeatureNorm::fit(examples.iter().map(|e| &e.features));
    let (layout, params) = Layout::build::<T>(cfg, speakers.len(), cfg.seed);
    let mut enc = SpeakerEncoder { config: cfg.clone(), speakers, norm, layout, params };
    let mut opt = Adam::new(cfg.optimizer, &enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Matrix<T>>> = None;
            for &i in batch {
                let mut tape = Tape::new();
                let mut bound = Bound::new(&enc.params);
                let (_, logits) = enc.forward(&mut tape, &mut bound, &examples[i].features)?;
                let l = tape.cross_entropy(logits, &[examples[i].speaker], &[T::one()]);
                if !tape.value(l)[(0, 0)].is_finite() {
                    return Err(Error::Training(format!("non-finite speaker loss at epoch {epoch}")));
                }
                let mut g = tape.backward(l);
                let grads = bound.collect(&mut g);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = T::one() / T::of_usize(batch.len());
            for g in grads.iter_mut() {
                g.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
            }
            opt.update(&mut enc.params, &mut grads);
        }
    }
    let acc = enc.accuracy(examples)?;
    Ok((enc, acc))
}

#[derive(Serialize, Deserialize)]
struct Stored {
    version: String,
    config: SvConfig,
    speakers: Vec<String>,
    norm: FeatureNorm,
    tensors: Vec<Vec<f32>>,
}

pub fn save_encoder<T: Scalar>(enc: &SpeakerEncoder<T>, path: &Path) -> Result<()> {
    let stored = Stored {
        version: VERSION.into(),
        config: enc.config.clone(),
        speakers: enc.speakers.clone(),
        norm: enc.norm.clone(),
        tensors: enc.params.tensors().iter().map(|t| t.as_slice().iter().map(|x| x.as_f64() as f32).collect()).collect(),
    };
    let json = serde_json::to_vec(&stored).map_err(|e| Error::format(path, e.to_string()))?;
    crate::io::write_atomic(path, &json)
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<SpeakerEncoder<T>> {
    if !path.exists() {
        return Err(Error::DanglingReference(path.to_path_buf()));
    }
    let stored: Stored =
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    if stored.version != VERSION {
        return Err(Error::Version { expected: VERSION.into(), found: stored.version });
    }
    let (layout, mut params) = Layout::build::<T>(&stored.config, stored.speakers.len(), 0);
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(Matrix::shape).collect();
    if shapes.len() != stored.tensors.len() {
        return Err(Error::format(path, "tensor count mismatch"));
    }
    let tensors = shapes
        .iter()
        .zip(stored.tensors)
        .map(|(&(r, c), v)| Matrix::from_vec(r, c, v.into_iter().map(|x| T::of(x as f64)).collect()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    params.replace(tensors).ok_or_else(|| Error::format(path, "tensor shape mismatch"))?;
    Ok(SpeakerEncoder { config: stored.config, speakers: stored.speakers, norm: stored.norm, layout, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_speaker_is_rejected() {
        let ex = vec![SvExample { features: Matrix::<f32>::zeros(3, FEATURE_DIM), speaker: 0 }];
        assert!(matches!(
            train_speaker_encoder(&ex, vec!["a".into()], &SvConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let ex: Vec<SvExample<f64>> = (0..4)
            .map(|i| SvExample { features: Matrix::filled(3, FEATURE_DIM, i as f64), speaker: i % 2 })
            .collect();
        let cfg = SvConfig { epochs: 1, hidden: 8, embed_dim: 4, ..Default::default() };
        let (enc, _) = train_speaker_encoder(&ex, vec!["a".into(), "b".into()], &cfg).unwrap();
        assert!(matches!(enc.embed(&Matrix::zeros(3, 5)), Err(Error::Shape(_))));
    }
}
