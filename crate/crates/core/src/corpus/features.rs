//! 120-dimensional acoustic features: 40 log-mel energies with first and
//! second order regression deltas.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const N_MELS: usize = 40;
pub const FEATURE_DIM: usize = 3 * N_MELS;
/// Half-width of the delta regression window.
pub const DELTA_WINDOW: usize = 2;
/// Power floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, window: 400, hop: 160, n_fft: 512, n_mels: N_MELS }
    }
}

impl FrameConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            1 + (samples - self.window) / self.hop
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_mels != N_MELS {
            return Err(Error::Parameter(format!("mel bins must be {N_MELS}, got {}", self.n_mels)));
        }
        if self.window == 0 || self.hop == 0 || self.n_fft < self.window {
            return Err(Error::Parameter(format!("invalid framing {self:?}")));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency of each mel filter, in Hz.
pub fn mel_centers(cfg: &FrameConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.n_mels).map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64)).collect()
}

/// Triangular HTK-style filterbank, `n_mels x n_bins`.
pub fn mel_filterbank(cfg: &FrameConfig) -> Matrix<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let edges: Vec<f64> =
        (0..cfg.n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Matrix::from_fn(cfg.n_mels, cfg.n_bins(), |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= c {
            (f - lo) / (c - lo)
        } else {
            (hi - f) / (hi - c)
        }
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable STFT analysis state.
pub struct Analyzer {
    cfg: FrameConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Matrix<f64>,
}

impl Analyzer {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg, fft, window: hann(cfg.window), filterbank: mel_filterbank(&cfg) })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix<f64> {
        &self.filterbank
    }

    /// Complex STFT, `frames x n_bins`.
    pub fn stft(&self, samples: &[f64]) -> Result<Vec<Vec<Complex<f64>>>> {
        let frames = self.cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::Input(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                samples.len(),
                self.cfg.window
            )));
        }
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for t in 0..frames {
            let off = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.cfg.window {
                    Complex::new(samples[off + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            out.push(buf[..self.cfg.n_bins()].to_vec());
        }
        Ok(out)
    }

    /// Static log-mel energies, `frames x 40`.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Matrix<f64>> {
        let spec = self.stft(samples)?;
        let power = Matrix::from_fn(spec.len(), self.cfg.n_bins(), |t, k| spec[t][k].norm_sqr());
        let mel = power.matmul_t(&self.filterbank)?;
        Ok(mel.map(|e| e.max(LOG_FLOOR).ln()))
    }

    pub fn features<T: Scalar>(&self, samples: &[f64]) -> Result<Matrix<T>> {
        Ok(append_deltas(&self.log_mel(samples)?).cast())
    }
}

/// `waveform -> frames x 120` features under `cfg`.
pub fn compute_features<T: Scalar>(samples: &[f64], cfg: &FrameConfig) -> Result<Matrix<T>> {
    Analyzer::new(*cfg)?.features(samples)
}

/// Regression delta over +-2 frames with edge replication.
pub fn delta<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = x.shape();
    let n = DELTA_WINDOW as isize;
    let denom = T::of((2 * (1..=n).map(|k| k * k).sum::<isize>()) as f64);
    let clamp = |t: isize| t.clamp(0, rows as isize - 1) as usize;
    Matrix::from_fn(rows, cols, |t, j| {
        let mut acc = T::zero();
        for k in 1..=n {
            let fwd = x[(clamp(t as isize + k), j)];
            let back = x[(clamp(t as isize - k), j)];
            acc += T::of(k as f64) * (fwd - back);
        }
        acc / denom
    })
}

/// `[static | delta | delta-delta]`.
pub fn append_deltas<T: Scalar>(stat: &Matrix<T>) -> Matrix<T> {
    let d1 = delta(stat);
    let d2 = delta(&d1);
    let (rows, c) = stat.shape();
    Matrix::from_fn(rows, 3 * c, |t, j| match j / c {
        0 => stat[(t, j)],
        1 => d1[(t, j - c)],
        _ => d2[(t, j - 2 * c)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_statics_have_zero_deltas() {
        let stat = Matrix::<f64>::filled(9, N_MELS, -3.5);
        let f = append_deltas(&stat);
        assert_eq!(f.cols(), FEATURE_DIM);
        for t in 0..9 {
            assert!(f.row(t)[N_MELS..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn short_waveform_is_input_error() {
        let r = compute_features::<f32>(&[0.0; 399], &FrameConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn only_forty_mel_bins_accepted() {
        let cfg = FrameConfig { n_mels: 24, ..FrameConfig::default() };
        assert!(matches!(compute_features::<f32>(&[0.0; 800], &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn delta_of_ramp_is_slope_in_interior() {
        let stat = Matrix::<f64>::from_fn(10, 1, |t, _| 2.0 * t as f64);
        let d = delta(&stat);
        for t in 2..8 {
            assert!((d[(t, 0)] - 2.0).abs() < 1e-12);
        }
        // replicated edges shrink the slope estimate at the ends
        assert!(d[(0, 0)] < 2.0);
    }
}
