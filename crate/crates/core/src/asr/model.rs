//! Speaker-adapted transformer encoder-decoder.
//!
//! Pre-norm layers throughout. The frontend stacks frame pairs (a stride-2,
//! kernel-2 convolution written as a reshape plus projection), so the
//! encoder runs at half the input frame rate. Input features are normalized
//! with corpus statistics stored in the model, which keeps gradients with
//! respect to raw features exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asr::vocab::{LabelSequence, VocabSpec, SOS};
use crate::autodiff::{Tape, Var};
use crate::corpus::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{dropout, positional_encoding, Bound, Builder, LayerNorm, Linear, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_layers: 2, decoder_layers: 2, model_dim: 64, heads: 4, ffn_dim: 128, dropout: 0.1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.encoder_layers, self.decoder_layers, self.model_dim, self.heads, self.ffn_dim];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Parameter(format!("model sizes must be positive: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Frames consumed per encoder step.
pub const SUBSAMPLING: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    frontend: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    embedding: usize,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    output: Linear,
}

/// Per-column affine normalization of raw features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], inv_std: vec![1.0; dim] }
    }

    pub fn fit<'a, T: Scalar>(feats: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let mut sum = vec![0.0; FEATURE_DIM];
        let mut sq = vec![0.0; FEATURE_DIM];
        let mut n = 0usize;
        for f in feats {
            for r in f.iter_rows() {
                for (j, &x) in r.iter().enumerate() {
                    let x = x.as_f64();
                    sum[j] += x;
                    sq[j] += x * x;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| 1.0 / ((s / n - m * m).max(0.0).sqrt() + 1e-3))
            .collect();
        Self { mean, inv_std }
    }
}

/// The recognizer. Parameters are immutable once `frozen` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrModel<T> {
    config: ModelConfig,
    vocab: VocabSpec,
    norm: FeatureNorm,
    params: ParamSet<T>,
    layout: Layout,
    frozen: bool,
}

/// Which prediction positions contribute to the loss.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionMask {
    /// Every target token.
    All,
    /// Only the first prediction, the speaker token.
    SpeakerOnly,
    /// Explicit per-target flags.
    Custom(Vec<bool>),
}

impl PositionMask {
    fn weights<T: Scalar>(&self, n: usize) -> Result<Vec<T>> {
        let flags: Vec<bool> = match self {
            PositionMask::All => vec![true; n],
            PositionMask::SpeakerOnly => (0..n).map(|i| i == 0).collect(),
            PositionMask::Custom(f) => {
                if f.len() != n {
                    return Err(Error::Shape(format!("mask of length {} for {n} targets", f.len())));
                }
                f.clone()
            }
        };
        let count = flags.iter().filter(|&&f| f).count();
        let w = if count == 0 { T::zero() } else { T::one() / T::of_usize(count) };
        Ok(flags.into_iter().map(|f| if f { w } else { T::zero() }).collect())
    }
}

impl<T: Scalar> AsrModel<T> {
    pub fn new(config: ModelConfig, vocab: VocabSpec, norm: FeatureNorm, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let v = vocab.size();
        let mut b = Builder::<T, _>::new(rng);
        let attention = |b: &mut Builder<T, _>, name: &str| Attention {
            q: b.linear(&format!("{name}.q"), d, d),
            k: b.linear(&format!("{name}.k"), d, d),
            v: b.linear(&format!("{name}.v"), d, d),
            o: b.linear(&format!("{name}.o"), d, d),
        };
        let ffn = |b: &mut Builder<T, _>, name: &str| FeedForward {
            up: b.linear(&format!("{name}.up"), d, config.ffn_dim),
            down: b.linear(&format!("{name}.down"), config.ffn_dim, d),
        };
        let frontend = b.linear("frontend", SUBSAMPLING * FEATURE_DIM, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                norm_attn: b.layer_norm(&format!("enc{i}.norm_attn"), d),
                attn: attention(&mut b, &format!("enc{i}.attn")),
                norm_ffn: b.layer_norm(&format!("enc{i}.norm_ffn"), d),
                ffn: ffn(&mut b, &format!("enc{i}.ffn")),
            })
            .collect();
        let encoder_norm = b.layer_norm("enc.norm", d);
        let embedding = b.normal("embedding", v, d, 1.0);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                norm_self: b.layer_norm(&format!("dec{i}.norm_self"), d),
                self_attn: attention(&mut b, &format!("dec{i}.self")),
                norm_cross: b.layer_norm(&format!("dec{i}.norm_cross"), d),
                cross_attn: attention(&mut b, &format!("dec{i}.cross")),
                norm_ffn: b.layer_norm(&format!("dec{i}.norm_ffn"), d),
                ffn: ffn(&mut b, &format!("dec{i}.ffn")),
            })
            .collect();
        let decoder_norm = b.layer_norm("dec.norm", d);
        let output = b.linear("output", d, v);
        let layout = Layout { frontend, encoder, encoder_norm, embedding, decoder, decoder_norm, output };
        Ok(Self { config, vocab, norm, params: b.params, layout, frozen: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<T>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> AsrModel<U> {
        AsrModel {
            config: self.config,
            vocab: self.vocab.clone(),
            norm: self.norm.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            frozen: self.frozen,
        }
    }

    pub(crate) fn with_params(mut self, params: ParamSet<T>) -> Result<Self> {
        if params.names() != self.params.names() {
            return Err(Error::Parameter("parameter names do not match the model layout".into()));
        }
        self.params
            .replace(params.tensors().to_vec())
            .ok_or_else(|| Error::Shape("parameter shapes do not match the model layout".into()))?;
        Ok(self)
    }

    /// Usable input frames (a trailing odd frame is dropped by the frontend).
    pub fn usable_frames(frames: usize) -> usize {
        frames - frames % SUBSAMPLING
    }

    pub fn check_features(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != FEATURE_DIM {
            return Err(Error::Shape(format!("features have {} columns, expected {FEATURE_DIM}", x.cols())));
        }
        if x.rows() < SUBSAMPLING {
            return Err(Error::Shape(format!("need at least {SUBSAMPLING} frames, got {}", x.rows())));
        }
        Ok(())
    }
}

/// Forward-pass builder for one utterance.
pub struct Graph<'m, T> {
    pub tape: Tape<T>,
    model: &'m AsrModel<T>,
    bound: Bound<'m, T>,
}

impl<'m, T: Scalar> Graph<'m, T> {
    pub fn new(model: &'m AsrModel<T>) -> Self {
        Self { tape: Tape::new(), model, bound: Bound::new(&model.params) }
    }

    /// Place the (even-length prefix of the) raw feature matrix as a leaf.
    pub fn input(&mut self, x: &Matrix<T>) -> Result<Var> {
        self.model.check_features(x)?;
        let t = AsrModel::<T>::usable_frames(x.rows());
        let x = if t == x.rows() { x.clone() } else { x.select_rows(&(0..t).collect::<Vec<_>>()) };
        Ok(self.tape.leaf(x))
    }

    fn param(&mut self, idx: usize) -> Var {
        self.bound.var(&mut self.tape, idx)
    }

    fn constant_row(&mut self, v: &[f64]) -> Var {
        let row: Vec<T> = v.iter().map(|&x| T::of(x)).collect();
        self.tape.leaf(Matrix::row_vector(&row))
    }

    fn linear(&mut self, l: Linear, x: Var) -> Var {
        l.apply(&mut self.tape, &mut self.bound, x)
    }

    fn layer_norm(&mut self, l: LayerNorm, x: Var) -> Var {
        l.apply(&mut self.tape, &mut self.bound, x)
    }

    fn attention(&mut self, a: &Attention, q_in: Var, kv_in: Var, causal: bool) -> Var {
        let heads = self.model.config.heads;
        let dk = self.model.config.model_dim / heads;
        let q = self.linear(a.q, q_in);
        let k = self.linear(a.k, kv_in);
        let v = self.linear(a.v, kv_in);
        let scale = T::one() / T::of_usize(dk).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.col_slice(q, h * dk, dk);
            let kh = self.tape.col_slice(k, h * dk, dk);
            let vh = self.tape.col_slice(v, h * dk, dk);
            let s = self.tape.matmul_bt(qh, kh);
            let s = self.tape.scale(s, scale);
            let p = self.tape.softmax(s, causal);
            outs.push(self.tape.matmul(p, vh));
        }
        let o = self.tape.concat_cols(&outs);
        self.linear(a.o, o)
    }

    fn feed_forward(&mut self, f: &FeedForward, x: Var) -> Var {
        let h = self.linear(f.up, x);
        let h = self.tape.gelu(h);
        self.linear(f.down, h)
    }

    fn residual<R: Rng>(&mut self, x: Var, y: Var, rng: &mut Option<&mut R>) -> Var {
        let y = dropout(&mut self.tape, y, self.model.config.dropout, rng.as_deref_mut());
        self.tape.add(x, y)
    }

    /// Encoder output `h^E`, `T/2 x D`. Dropout is active only with `rng`.
    pub fn encode<R: Rng>(&mut self, x: Var, mut rng: Option<&mut R>) -> Var {
        let layout = &self.model.layout;
        let (t, _) = self.tape.value(x).shape();
        let neg_mean: Vec<f64> = self.model.norm.mean.iter().map(|m| -m).collect();
        let shift = self.constant_row(&neg_mean);
        let scale = self.constant_row(&self.model.norm.inv_std.clone());
        let z = self.tape.add_row(x, shift);
        let z = self.tape.mul_row(z, scale);
        let z = self.tape.reshape(z, t / SUBSAMPLING, SUBSAMPLING * FEATURE_DIM);
        let mut h = self.linear(layout.frontend, z);
        let pe = self.tape.leaf(positional_encoding(t / SUBSAMPLING, self.model.config.model_dim));
        h = self.tape.add(h, pe);
        for layer in &layout.encoder {
            let n = self.layer_norm(layer.norm_attn, h);
            let a = self.attention(&layer.attn, n, n, false);
            h = self.residual(h, a, &mut rng);
            let n = self.layer_norm(layer.norm_ffn, h);
            let f = self.feed_forward(&layer.ffn, n);
            h = self.residual(h, f, &mut rng);
        }
        self.layer_norm(layout.encoder_norm, h)
    }

    /// Next-token logits for each decoder input position, `L x V`.
    pub fn decode<R: Rng>(&mut self, enc: Var, inputs: &[usize], mut rng: Option<&mut R>) -> Var {
        let layout = &self.model.layout;
        let emb = self.param(layout.embedding);
        let mut h = self.tape.gather(emb, inputs);
        let pe = self.tape.leaf(positional_encoding(inputs.len(), self.model.config.model_dim));
        h = self.tape.add(h, pe);
        for layer in &layout.decoder {
            let n = self.layer_norm(layer.norm_self, h);
            let a = self.attention(&layer.self_attn, n, n, true);
            h = self.residual(h, a, &mut rng);
            let n = self.layer_norm(layer.norm_cross, h);
            let c = self.attention(&layer.cross_attn, n, enc, false);
            h = self.residual(h, c, &mut rng);
            let n = self.layer_norm(layer.norm_ffn, h);
            let f = self.feed_forward(&layer.ffn, n);
            h = self.residual(h, f, &mut rng);
        }
        let h = self.layer_norm(layout.decoder_norm, h);
        self.linear(layout.output, h)
    }

    /// Masked teacher-forced cross-entropy node.
    pub fn loss(&mut self, logits: Var, labels: &LabelSequence, mask: &PositionMask) -> Result<Var> {
        let targets = labels.targets();
        let weights = mask.weights::<T>(targets.len())?;
        Ok(self.tape.cross_entropy(logits, targets, &weights))
    }

    /// Parameter gradients for `root`, in parameter order.
    pub fn param_grads(&self, root: Var) -> Vec<Matrix<T>> {
        let mut g = self.tape.backward(root);
        self.bound.collect(&mut g)
    }
}

type NoRng = rand_chacha::ChaCha8Rng;

/// `h^E = Encoder(x)` in inference mode.
pub fn encode<T: Scalar>(model: &AsrModel<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut g = Graph::new(model);
    let xv = g.input(x)?;
    let h = g.encode::<NoRng>(xv, None);
    Ok(g.tape.value(h).clone())
}

/// Teacher-forced masked cross-entropy `J(theta, x, y)`, inference mode.
pub fn loss<T: Scalar>(model: &AsrModel<T>, x: &Matrix<T>, labels: &LabelSequence, mask: &PositionMask) -> Result<T> {
    labels.validate(&model.vocab)?;
    let mut g = Graph::new(model);
    let xv = g.input(x)?;
    let h = g.encode::<NoRng>(xv, None);
    let logits = g.decode::<NoRng>(h, labels.inputs(), None);
    let l = g.loss(logits, labels, mask)?;
    Ok(g.tape.value(l)[(0, 0)])
}

/// Exact `dJ/dx` for the masked loss, same shape as `x`. Parameters are only read.
pub fn grad_input<T: Scalar>(
    model: &AsrModel<T>,
    x: &Matrix<T>,
    labels: &LabelSequence,
    mask: &PositionMask,
) -> Result<(T, Matrix<T>)> {
    labels.validate(&model.vocab)?;
    let mut g = Graph::new(model);
    let xv = g.input(x)?;
    let h = g.encode::<NoRng>(xv, None);
    let logits = g.decode::<NoRng>(h, labels.inputs(), None);
    let l = g.loss(logits, labels, mask)?;
    let value = g.tape.value(l)[(0, 0)];
    let mut grads = g.tape.backward(l);
    let mut full = Matrix::zeros(x.rows(), x.cols());
    if let Some(gx) = grads.take(xv) {
        for i in 0..gx.rows() {
            full.row_mut(i).copy_from_slice(gx.row(i));
        }
    }
    Ok((value, full))
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    /// Emitted tokens after `<SOS>`, including `<EOS>` when reached.
    pub tokens: Vec<usize>,
    /// Softmax posterior at each step.
    pub posteriors: Vec<Vec<T>>,
}

impl<T> Decoded<T> {
    /// Step-1 prediction (the speaker slot).
    pub fn first(&self) -> Option<usize> {
        self.tokens.first().copied()
    }
}

/// Autoregressive argmax decoding from `<SOS>` until `<EOS>` or `max_len` steps.
pub fn decode_greedy<T: Scalar>(model: &AsrModel<T>, enc: &Matrix<T>, max_len: usize) -> Result<Decoded<T>> {
    if enc.cols() != model.config.model_dim {
        return Err(Error::Shape(format!("encoder output width {} != model dim", enc.cols())));
    }
    if !enc.is_finite() {
        return Err(Error::Input("encoder output is not finite".into()));
    }
    let mut prefix = vec![SOS];
    let mut out = Decoded { tokens: Vec::new(), posteriors: Vec::new() };
    for _ in 0..max_len {
        let mut g = Graph::new(model);
        let e = g.tape.leaf(enc.clone());
        let logits = g.decode::<NoRng>(e, &prefix, None);
        let lv = g.tape.value(logits);
        let mut post = lv.row(lv.rows() - 1).to_vec();
        crate::autodiff::softmax_in_place(&mut post);
        let tok = argmax(&post);
        out.tokens.push(tok);
        out.posteriors.push(post);
        if tok == crate::asr::vocab::EOS {
            break;
        }
        prefix.push(tok);
    }
    Ok(out)
}

/// Step-1 posterior only: the speaker-token distribution.
pub fn first_step_posterior<T: Scalar>(model: &AsrModel<T>, enc: &Matrix<T>) -> Result<Vec<T>> {
    let d = decode_greedy(model, enc, 1)?;
    Ok(d.posteriors.into_iter().next().expect("one step decoded"))
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
