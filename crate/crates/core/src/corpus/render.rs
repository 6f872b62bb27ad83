//! Source-filter waveform rendering from per-character spectral templates.
//!
//! Every letter owns three formants; the speaker's `formant_scale` warps the
//! envelope and its pitch sets the harmonic spacing. Space is a pause that
//! carries only the aperiodic component. Harmonics are advanced with complex
//! rotators, so rendering costs one multiply-add per harmonic per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::features::FrameConfig;
use crate::corpus::voice::VoiceParams;
use crate::error::{Error, Result};

/// Transcript alphabet: 26 lowercase letters and space.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";

pub fn char_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        ' ' => Some(26),
        _ => None,
    }
}

/// Formant layout of one character.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharTemplate {
    /// Formant centers in Hz at `formant_scale = 1`.
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    pub gains: [f64; 3],
    /// False for the pause symbol.
    pub voiced: bool,
}

/// The fixed bank of character templates.
pub fn char_template(idx: usize) -> CharTemplate {
    assert!(idx < 27, "character index {idx} outside alphabet");
    if idx == 26 {
        return CharTemplate { formants: [0.0; 3], bandwidths: [1.0; 3], gains: [0.0; 3], voiced: false };
    }
    // Low-discrepancy placement in (F1, F2, F3) so letters stay distinct.
    let u = |base: u32| radical_inverse(idx as u32 + 1, base);
    let f1 = 250.0 + 600.0 * u(2);
    let f2 = (f1 + 450.0).max(850.0 + 1500.0 * u(3));
    let f3 = (f2 + 400.0).max(2300.0 + 1200.0 * u(5));
    let g = 0.55 + 0.45 * u(7);
    CharTemplate {
        formants: [f1, f2, f3],
        bandwidths: [90.0 + 60.0 * u(11), 120.0 + 80.0 * u(13), 160.0 + 100.0 * u(17)],
        gains: [1.0, g, 0.6 * g],
        voiced: true,
    }
}

fn radical_inverse(mut n: u32, base: u32) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while n > 0 {
        out += (n % base) as f64 * inv;
        n /= base;
        inv /= base as f64;
    }
    out
}

impl CharTemplate {
    /// Envelope magnitude at `freq` for a speaker with the given warp.
    pub fn envelope(&self, freq: f64, formant_scale: f64) -> f64 {
        if !self.voiced {
            return 0.0;
        }
        let f = freq / formant_scale;
        let mut e = 0.0;
        for k in 0..3 {
            let z = (f - self.formants[k]) / self.bandwidths[k];
            e += self.gains[k] * (-0.5 * z * z).exp();
        }
        // mild glottal roll-off
        e + 0.02 / (1.0 + f / 1000.0)
    }
}

/// Per-utterance deviations from the speaker's nominal voice.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Variation {
    pub f0_ratio: f64,
    pub formant_ratio: f64,
    pub gain_db: f64,
}

impl Variation {
    pub fn none() -> Self {
        Self { f0_ratio: 1.0, formant_ratio: 1.0, gain_db: 0.0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            f0_ratio: 1.0 + rng.random_range(-0.03..=0.03),
            formant_ratio: 1.0 + rng.random_range(-0.015..=0.015),
            gain_db: rng.random_range(-2.0..=2.0),
        }
    }
}

/// Number of samples whose feature extraction yields exactly `frames` frames.
pub fn samples_for_frames(frames: usize, cfg: &FrameConfig) -> usize {
    (frames - 1) * cfg.hop + cfg.window
}

const BLOCK: usize = 80;
const MAX_HARMONICS: usize = 96;
const VOICED_LEVEL: f64 = 0.25;

/// Render `text` in `voice`; each character occupies `frames_per_char` hops.
pub fn render(
    voice: &VoiceParams,
    text: &str,
    variation: &Variation,
    cfg: &FrameConfig,
    frames_per_char: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = text
        .chars()
        .map(|c| char_index(c).ok_or_else(|| Error::Vocab(format!("character {c:?} outside alphabet"))))
        .collect::<Result<_>>()?;
    if idx.is_empty() {
        return Err(Error::Input("empty text".into()));
    }
    if frames_per_char == 0 {
        return Err(Error::Parameter("frames_per_char must be positive".into()));
    }
    let templates: Vec<CharTemplate> = idx.iter().map(|&i| char_template(i)).collect();
    let seg = frames_per_char * cfg.hop;
    let total = samples_for_frames(idx.len() * frames_per_char, cfg);
    let sr = cfg.sample_rate as f64;
    let f0_nom = voice.f0_hz * variation.f0_ratio;
    let warp = voice.formant_scale * variation.formant_ratio;
    let gain = 10f64.powf(variation.gain_db / 20.0);
    let crossfade = (seg / 4).max(1) as f64;

    let mut out = vec![0.0; total];
    let mut rot_re = vec![1.0f64; MAX_HARMONICS];
    let mut rot_im = vec![0.0f64; MAX_HARMONICS];
    let mut amps = vec![0.0f64; MAX_HARMONICS];
    let mut start = 0;
    while start < total {
        let end = (start + BLOCK).min(total);
        let mid = (start + end) as f64 / 2.0;
        let pos = mid / (idx.len() * seg) as f64;
        // gentle declination over the utterance
        let f0 = f0_nom * (1.05 - 0.1 * pos.min(1.0));
        let n_harm = ((0.45 * sr / f0) as usize).min(MAX_HARMONICS);
        let ci = ((mid as usize) / seg).min(idx.len() - 1);
        let into = mid - (ci * seg) as f64;
        let next_w = if ci + 1 < idx.len() && into > seg as f64 - crossfade {
            0.5 * (into - (seg as f64 - crossfade)) / crossfade
        } else {
            0.0
        };
        let prev_w = if ci > 0 && into < crossfade { 0.5 * (1.0 - into / crossfade) } else { 0.0 };
        let cur = &templates[ci];
        for (h, a) in amps.iter_mut().enumerate().take(n_harm) {
            let f = (h + 1) as f64 * f0;
            let mut e = (1.0 - next_w - prev_w) * cur.envelope(f, warp);
            if next_w > 0.0 {
                e += next_w * templates[ci + 1].envelope(f, warp);
            }
            if prev_w > 0.0 {
                e += prev_w * templates[ci - 1].envelope(f, warp);
            }
            *a = e;
        }
        let norm: f64 = amps[..n_harm].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let voiced_frac = {
            let v = |t: &CharTemplate| if t.voiced { 1.0 } else { 0.0 };
            let mut w = (1.0 - next_w - prev_w) * v(cur);
            if next_w > 0.0 {
                w += next_w * v(&templates[ci + 1]);
            }
            if prev_w > 0.0 {
                w += prev_w * v(&templates[ci - 1]);
            }
            w
        };
        let scale = gain * VOICED_LEVEL * voiced_frac / norm;
        for a in amps[..n_harm].iter_mut() {
            *a *= scale;
        }
        for h in 0..n_harm {
            let w = 2.0 * std::f64::consts::PI * (h + 1) as f64 * f0 / sr;
            let (ws, wc) = w.sin_cos();
            let (mut re, mut im) = (rot_re[h], rot_im[h]);
            let a = amps[h];
            for s in out[start..end].iter_mut() {
                let nre = re * wc - im * ws;
                im = re * ws + im * wc;
                re = nre;
                *s += a * im;
            }
            // renormalize to stop rotator drift
            let r = (re * re + im * im).sqrt();
            rot_re[h] = re / r;
            rot_im[h] = im / r;
        }
        for h in n_harm..MAX_HARMONICS {
            // keep silent rotators advancing so harmonics re-enter smoothly
            let w = 2.0 * std::f64::consts::PI * (h + 1) as f64 * f0 / sr * (end - start) as f64;
            let (ws, wc) = w.sin_cos();
            let (re, im) = (rot_re[h], rot_im[h]);
            rot_re[h] = re * wc - im * ws;
            rot_im[h] = re * ws + im * wc;
        }
        start = end;
    }
    if voice.noise_floor > 0.0 {
        let normal = Normal::new(0.0, voice.noise_floor * gain).expect("valid std");
        for s in out.iter_mut() {
            *s += normal.sample(rng);
        }
    }
    Ok(out)
}
