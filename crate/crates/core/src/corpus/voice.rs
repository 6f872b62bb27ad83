use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source-filter voice description shared by corpus generation and synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceParams {
    /// Base pitch in Hz.
    pub f0_hz: f64,
    /// Spectral-envelope warp; formant frequencies are multiplied by it.
    pub formant_scale: f64,
    /// Linear amplitude of the additive aperiodic component, in `[0, 1)`.
    pub noise_floor: f64,
}

/// Inclusive bounds of each voice parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceRanges {
    pub f0_hz: (f64, f64),
    pub formant_scale: (f64, f64),
    pub noise_floor: (f64, f64),
}

impl Default for VoiceRanges {
    fn default() -> Self {
        Self { f0_hz: (90.0, 250.0), formant_scale: (0.82, 1.22), noise_floor: (0.002, 0.03) }
    }
}

impl VoiceRanges {
    pub fn midpoint(&self) -> VoiceParams {
        VoiceParams {
            f0_hz: (self.f0_hz.0 * self.f0_hz.1).sqrt(),
            formant_scale: (self.formant_scale.0 * self.formant_scale.1).sqrt(),
            noise_floor: (self.noise_floor.0 * self.noise_floor.1).sqrt(),
        }
    }

    /// Bounds in log space, the coordinates the synthesizer regresses on.
    pub fn log_bounds(&self) -> [(f64, f64); 3] {
        [
            (self.f0_hz.0.ln(), self.f0_hz.1.ln()),
            (self.formant_scale.0.ln(), self.formant_scale.1.ln()),
            (self.noise_floor.0.ln(), self.noise_floor.1.ln()),
        ]
    }
}

impl VoiceParams {
    pub fn to_log(&self) -> [f64; 3] {
        [self.f0_hz.ln(), self.formant_scale.ln(), self.noise_floor.ln()]
    }

    pub fn from_log(v: [f64; 3]) -> Self {
        Self { f0_hz: v[0].exp(), formant_scale: v[1].exp(), noise_floor: v[2].exp() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0_hz > 0.0) || !(self.formant_scale > 0.0) {
            return Err(Error::Parameter(format!("non-positive pitch or formant scale in {self:?}")));
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return Err(Error::Parameter(format!("noise floor {} outside [0, 1)", self.noise_floor)));
        }
        Ok(())
    }

    /// Distance in normalized log (pitch, formant) space, the space where
    /// speaker separation is enforced.
    pub fn separation(&self, other: &Self, ranges: &VoiceRanges) -> f64 {
        let b = ranges.log_bounds();
        let df = (self.f0_hz.ln() - other.f0_hz.ln()) / (b[0].1 - b[0].0);
        let ds = (self.formant_scale.ln() - other.formant_scale.ln()) / (b[1].1 - b[1].0);
        (df * df + ds * ds).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub voice: VoiceParams,
}

/// Draw `n` voices log-uniformly within `ranges`, rejecting candidates closer
/// than `min_separation` to an accepted one.
pub fn sample_profiles(
    n: usize,
    prefix: &str,
    ranges: &VoiceRanges,
    min_separation: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SpeakerProfile>> {
    let b = ranges.log_bounds();
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::Parameter(format!(
                "cannot place {n} speakers with separation {min_separation}"
            )));
        }
        let voice = VoiceParams::from_log([
            rng.random_range(b[0].0..=b[0].1),
            rng.random_range(b[1].0..=b[1].1),
            rng.random_range(b[2].0..=b[2].1),
        ]);
        if out.iter().all(|p| p.voice.separation(&voice, ranges) >= min_separation) {
            out.push(SpeakerProfile { speaker_id: format!("{prefix}{:03}", out.len()), voice });
        }
    }
    Ok(out)
}
