//! Deterministic toy multi-speaker synthesizer `z = G(X, text)`.
//!
//! A speaker embedding is mapped to source-filter voice parameters by a fitted
//! affine map followed by a logistic squash into the corpus voice ranges. The
//! text is rendered with the same per-character templates as the corpus,
//! analysed to a mel spectrogram, and turned back into audio by Griffin-Lim
//! phase reconstruction from the pseudo-inverse of the mel filterbank.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::corpus::render::samples_for_frames;
use crate::corpus::{render, Analyzer, FrameConfig, Variation, VoiceParams, VoiceRanges, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Matrix};

/// Fraction of each range treated as the reachable interior when fitting.
const FIT_CLAMP: f64 = 0.02;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Affine-then-squash map from embedding space to voice parameters.
///
/// `log p_k = lo_k + (hi_k - lo_k) * logistic(w_k . x + b_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceMap {
    /// `3 x D`, rows ordered (pitch, formant scale, noise floor).
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 3],
    pub ranges: VoiceRanges,
}

impl VoiceMap {
    /// Zero weights and bias: every embedding maps to the range midpoint.
    pub fn neutral(dim: usize, ranges: VoiceRanges) -> Self {
        Self { weights: vec![vec![0.0; dim]; 3], bias: [0.0; 3], ranges }
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    /// Ridge least squares of logit-scaled log voice parameters on the
    /// embeddings (`n x D`, one row per observation). `ridge` is relative to
    /// the mean diagonal of the centered Gram matrix.
    pub fn fit(embeddings: &Matrix<f64>, voices: &[VoiceParams], ranges: VoiceRanges, ridge: f64) -> Result<Self> {
        let (n, d) = embeddings.shape();
        if n != voices.len() || n < 2 {
            return Err(Error::Shape(format!("{n} embeddings for {} voices", voices.len())));
        }
        if !embeddings.is_finite() {
            return Err(Error::Input("non-finite embedding in voice map fit".into()));
        }
        let bounds = ranges.log_bounds();
        let targets = Matrix::from_fn(n, 3, |i, k| {
            let (lo, hi) = bounds[k];
            let frac = (voices[i].to_log()[k] - lo) / (hi - lo);
            logit(frac.clamp(FIT_CLAMP, 1.0 - FIT_CLAMP))
        });
        let xm = embeddings.col_mean();
        let zm = targets.col_mean();
        let xc = Matrix::from_fn(n, d, |i, j| embeddings[(i, j)] - xm[j]);
        let zc = Matrix::from_fn(n, 3, |i, k| targets[(i, k)] - zm[k]);
        let mut gram = xc.t_matmul(&xc)?;
        let trace: f64 = (0..d).map(|j| gram[(j, j)]).sum();
        let lambda = ridge * (trace / d as f64).max(f64::MIN_POSITIVE);
        for j in 0..d {
            gram[(j, j)] += lambda;
        }
        let w = solve_spd(&gram, &xc.t_matmul(&zc)?)?;
        let weights: Vec<Vec<f64>> = (0..3).map(|k| w.col(k)).collect();
        let mut bias = [0.0; 3];
        for k in 0..3 {
            bias[k] = zm[k] - weights[k].iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(Self { weights, bias, ranges })
    }

    /// Pre-squash activations `W x + b`.
    pub fn activations(&self, x: &[f64]) -> Result<[f64; 3]> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("embedding of length {} for a {}-dim map", x.len(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite embedding".into()));
        }
        let mut z = self.bias;
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += self.weights[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(z)
    }

    pub fn voice(&self, x: &[f64]) -> Result<VoiceParams> {
        let z = self.activations(x)?;
        let b = self.ranges.log_bounds();
        let l = [0, 1, 2].map(|k| b[k].0 + (b[k].1 - b[k].0) * logistic(z[k]));
        Ok(VoiceParams::from_log(l))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        crate::io::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::DanglingReference(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// `embed_to_voice(X)` under a fitted map.
pub fn embed_to_voice(map: &VoiceMap, x: &[f64]) -> Result<VoiceParams> {
    map.voice(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub text: String,
    pub embedding: Vec<f64>,
}

/// `T x 40` values `ln(1 + P / LOG_FLOOR)` of mel power `P`; zero is silence.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix<f64>,
}

impl MelSpectrogram {
    pub fn from_power(power: &Matrix<f64>) -> Self {
        Self { frames: power.map(|p| (p.max(0.0) / LOG_FLOOR).ln_1p()) }
    }

    pub fn power(&self) -> Matrix<f64> {
        self.frames.map(|m| m.exp_m1() * LOG_FLOOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames_per_char: usize,
    pub griffin_lim_iters: usize,
    pub frame: FrameConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames_per_char: 8, griffin_lim_iters: 32, frame: FrameConfig::default() }
    }
}

/// Seed derived from the text alone.
fn text_seed(text: &str) -> u64 {
    let h = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

pub struct Synthesizer {
    map: VoiceMap,
    cfg: SynthConfig,
    analyzer: Analyzer,
    /// `n_bins x 40` pseudo-inverse of the mel filterbank.
    inverse: Matrix<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

impl Synthesizer {
    pub fn new(map: VoiceMap, cfg: SynthConfig) -> Result<Self> {
        if cfg.frames_per_char == 0 {
            return Err(Error::Parameter("frames_per_char must be positive".into()));
        }
        let analyzer = Analyzer::new(cfg.frame)?;
        let fb = analyzer.filterbank();
        let mut gram = fb.matmul_t(fb)?;
        let scale = (0..gram.rows()).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        for i in 0..gram.rows() {
            gram[(i, i)] += 1e-9 * scale;
        }
        // pinv(F) = F^T (F F^T)^-1
        let inverse = solve_spd(&gram, fb)?.transpose();
        let ifft = FftPlanner::new().plan_fft_inverse(cfg.frame.n_fft);
        Ok(Self { map, cfg, analyzer, inverse, ifft })
    }

    pub fn map(&self) -> &VoiceMap {
        &self.map
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn synth_mel(&self, req: &SynthesisRequest) -> Result<MelSpectrogram> {
        let voice = self.map.voice(&req.embedding)?;
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(&req.text));
        let wave = render(&voice, &req.text, &Variation::none(), &self.cfg.frame, self.cfg.frames_per_char, &mut rng)?;
        let spec = self.analyzer.stft(&wave)?;
        let power = Matrix::from_fn(spec.len(), self.cfg.frame.n_bins(), |t, k| spec[t][k].norm_sqr());
        Ok(MelSpectrogram::from_power(&power.matmul_t(self.analyzer.filterbank())?))
    }

    /// Overlap-add inverse STFT with squared-window normalization.
    fn istft(&self, spec: &[Vec<Complex<f64>>], window: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg.frame;
        let len = samples_for_frames(spec.len(), cfg);
        let mut out = vec![0.0; len];
        let mut wsum = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for (t, frame) in spec.iter().enumerate() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < frame.len() { frame[k] } else { frame[cfg.n_fft - k].conj() };
            }
            self.ifft.process(&mut buf);
            let off = t * cfg.hop;
            for i in 0..cfg.window {
                out[off + i] += buf[i].re / cfg.n_fft as f64 * window[i];
                wsum[off + i] += window[i] * window[i];
            }
        }
        // the first and last samples are covered only by window tails
        let floor = 0.1 * wsum.iter().fold(0.0f64, |a, &w| a.max(w));
        for (o, w) in out.iter_mut().zip(&wsum) {
            *o /= w.max(floor).max(f64::MIN_POSITIVE);
        }
        out
    }

    /// Griffin-Lim reconstruction with zero initial phase and a fixed
    /// iteration count; output peak is at most 1.
    pub fn vocode(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        let frames = &mel.frames;
        if frames.rows() == 0 || frames.cols() != self.cfg.frame.n_mels {
            return Err(Error::Shape(format!("mel of shape {:?}", frames.shape())));
        }
        if frames.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input("mel values must be finite and nonnegative".into()));
        }
        let power = mel.power();
        let linear = power.matmul_t(&self.inverse)?;
        let mag = linear.map(|p| p.max(0.0).sqrt());
        let window = crate::corpus::features::hann(self.cfg.frame.window);
        let mut spec: Vec<Vec<Complex<f64>>> =
            (0..mag.rows()).map(|t| mag.row(t).iter().map(|&m| Complex::new(m, 0.0)).collect()).collect();
        let mut wave = self.istft(&spec, &window);
        for _ in 0..self.cfg.griffin_lim_iters {
            let est = self.analyzer.stft(&wave)?;
            for (t, row) in spec.iter_mut().enumerate() {
                for (k, c) in row.iter_mut().enumerate() {
                    let e = est[t][k];
                    let n = e.norm();
                    let m = mag[(t, k)];
                    *c = if n > 0.0 { e * (m / n) } else { Complex::new(m, 0.0) };
                }
            }
            wave = self.istft(&spec, &window);
        }
        let peak = wave.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak > 1.0 {
            for v in wave.iter_mut() {
                *v /= peak;
            }
        }
        Ok(wave)
    }

    /// Mel and waveform for one request.
    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<(MelSpectrogram, Vec<f64>)> {
        let mel = self.synth_mel(req)?;
        let wave = self.vocode(&mel)?;
        Ok((mel, wave))
    }
}

/// One line of the synth request TSV: `utt_id<TAB>text<TAB>embedding-file<TAB>row`.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestLine {
    pub utt_id: String,
    pub text: String,
    pub embedding_file: String,
    pub row: usize,
}

pub fn format_requests(lines: &[RequestLine]) -> String {
    lines.iter().map(|l| format!("{}\t{}\t{}\t{}\n", l.utt_id, l.text, l.embedding_file, l.row)).collect()
}

pub fn parse_requests(text: &str, origin: &Path) -> Result<Vec<RequestLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(origin, format!("line {}: expected utt_id, text, file, row", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(RequestLine {
                utt_id: f[0].to_string(),
                text: f[1].to_string(),
                embedding_file: f[2].to_string(),
                row: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
