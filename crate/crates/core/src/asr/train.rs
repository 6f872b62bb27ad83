use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::model::{encode, first_step_posterior, argmax, AsrModel, FeatureNorm, Graph, ModelConfig, PositionMask};
use crate::asr::vocab::{LabelSequence, VocabSpec};
use crate::corpus::manifest::{feature_file, Manifest};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 16, seed: 1, optimizer: AdamConfig { cosine_decay: true, ..AdamConfig::default() } }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub parameters: usize,
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub features: Matrix<T>,
    pub labels: LabelSequence,
}

/// Read every utterance of `manifest` and encode its labels.
pub fn load_examples<T: Scalar>(manifest: &Manifest, manifest_path: &Path, vocab: &VocabSpec) -> Result<Vec<Example<T>>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let labels = vocab.encode(&e.speaker_id, &e.transcript)?;
            let features = crate::io::read_matrix(&feature_file(manifest_path, e))?;
            Ok(Example { features, labels })
        })
        .collect()
}

/// Train on the manifest's utterances with the speaker token in every label.
/// The returned model is frozen.
pub fn train<T: Scalar>(
    manifest: &Manifest,
    manifest_path: &Path,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(AsrModel<T>, TrainReport)> {
    let vocab = VocabSpec::new(manifest.speaker_set.iter().cloned().collect())?;
    let examples = load_examples(manifest, manifest_path, &vocab)?;
    train_examples(&examples, vocab, cfg, train_cfg, &mut progress)
}

pub fn train_examples<T: Scalar>(
    examples: &[Example<T>],
    vocab: VocabSpec,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    progress: &mut impl FnMut(usize, f64),
) -> Result<(AsrModel<T>, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::Parameter("no training examples".into()));
    }
    if train_cfg.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    for ex in examples {
        ex.labels.validate(&vocab)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let norm = FeatureNorm::fit(examples.iter().map(|e| &e.features));
    let mut model = AsrModel::<T>::new(*cfg, vocab, norm, &mut rng)?;
    let mut opt = Adam::new(train_cfg.optimizer, model.params());
    opt.set_total_steps(train_cfg.epochs * examples.len().div_ceil(train_cfg.batch_size));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport { parameters: model.params().scalar_count(), ..Default::default() };
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut acc: Option<Vec<Matrix<T>>> = None;
            for &i in batch {
                let ex = &examples[i];
                let mut g = Graph::new(&model);
                let x = g.input(&ex.features)?;
                let h = g.encode(x, Some(&mut rng));
                let logits = g.decode(h, ex.labels.inputs(), Some(&mut rng));
                let l = g.loss(logits, &ex.labels, &PositionMask::All)?;
                let lv = g.tape.value(l)[(0, 0)].as_f64();
                if !lv.is_finite() {
                    return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
                }
                epoch_loss += lv;
                let grads = g.param_grads(l);
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
            opt.update(model.params_mut()?, &mut grads);
            report.steps += 1;
        }
        let mean = epoch_loss / examples.len() as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    if model.params().tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    model.freeze();
    Ok((model, report))
}

/// Fraction of examples whose step-1 prediction is their speaker token.
pub fn speaker_token_accuracy<T: Scalar>(model: &AsrModel<T>, examples: &[Example<T>]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let enc = encode(model, &ex.features)?;
        let post = first_step_posterior(model, &enc)?;
        if argmax(&post) == ex.labels.tokens[1] {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
