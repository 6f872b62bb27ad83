//! Synthetic multi-speaker corpus and acoustic features.

pub mod features;
pub mod manifest;
pub mod render;
pub mod voice;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use features::{compute_features, Analyzer, FrameConfig, FEATURE_DIM, LOG_FLOOR, N_MELS};
pub use manifest::{feature_file, load_manifest, save_manifest, Manifest, ManifestEntry};
pub use render::{render, Variation, ALPHABET};
pub use voice::{sample_profiles, SpeakerProfile, VoiceParams, VoiceRanges};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub transcript_len: (usize, usize),
    pub seed: u64,
    pub frames_per_char: usize,
    /// Minimum normalized log-(pitch, formant) distance between speakers.
    pub min_separation: f64,
    pub ranges: VoiceRanges,
    pub frame: FrameConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 110,
            transcript_len: (5, 20),
            seed: 1,
            frames_per_char: 8,
            min_separation: 0.15,
            ranges: VoiceRanges::default(),
            frame: FrameConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Parameter(format!("need at least 2 speakers, got {}", self.n_speakers)));
        }
        if self.utts_per_speaker < 1 {
            return Err(Error::Parameter("utts_per_speaker must be at least 1".into()));
        }
        let (lo, hi) = self.transcript_len;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("invalid transcript length range ({lo}, {hi})")));
        }
        if self.frames_per_char == 0 {
            return Err(Error::Parameter("frames_per_char must be positive".into()));
        }
        Ok(())
    }
}

/// Random transcript of words over the alphabet, length within `range`.
pub fn random_transcript(range: (usize, usize), rng: &mut impl Rng) -> String {
    let len = rng.random_range(range.0..=range.1);
    let mut s = String::with_capacity(len);
    while s.len() < len {
        let remaining = len - s.len();
        let word = rng.random_range(2..=6usize).min(remaining);
        for _ in 0..word {
            s.push((b'a' + rng.random_range(0..26u8)) as char);
        }
        // a space only if at least one more letter can follow
        if len - s.len() >= 2 {
            s.push(' ');
        }
    }
    s
}

fn utterance_rng(seed: u64, speaker: usize, utt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) | utt as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub manifest: Manifest,
    pub profiles: Vec<SpeakerProfile>,
    pub manifest_path: PathBuf,
}

/// Sample speakers, render every utterance and write
/// `out_dir/{manifest.tsv, speakers.tsv, feats/*.mat}`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let profiles = sample_profiles(cfg.n_speakers, "spk", &cfg.ranges, cfg.min_separation, &mut rng)?;
    generate_for_profiles(&profiles, cfg, out_dir, "utt")
}

/// Render a corpus for fixed speakers. Utterance ids are `{prefix}-{speaker}-{k}`.
pub fn generate_for_profiles(
    profiles: &[SpeakerProfile],
    cfg: &CorpusConfig,
    out_dir: &Path,
    prefix: &str,
) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let analyzer = Analyzer::new(cfg.frame)?;
    let mut entries = Vec::with_capacity(profiles.len() * cfg.utts_per_speaker);
    for (si, p) in profiles.iter().enumerate() {
        p.voice.validate()?;
        for k in 0..cfg.utts_per_speaker {
            let mut rng = utterance_rng(cfg.seed, si, k);
            let text = random_transcript(cfg.transcript_len, &mut rng);
            let variation = Variation::sample(&mut rng);
            let wave = render(&p.voice, &text, &variation, &cfg.frame, cfg.frames_per_char, &mut rng)?;
            let feats: Matrix<f32> = analyzer.features(&wave)?;
            let utt_id = format!("{prefix}-{}-{k:04}", p.speaker_id);
            let rel = PathBuf::from("feats").join(format!("{utt_id}.mat"));
            crate::io::write_matrix(&out_dir.join(&rel), &feats)?;
            entries.push(ManifestEntry {
                utt_id,
                speaker_id: p.speaker_id.clone(),
                feature_path: rel,
                transcript: text,
            });
        }
    }
    let manifest = Manifest::new(entries)?;
    let manifest_path = out_dir.join("manifest.tsv");
    save_manifest(&manifest, &manifest_path)?;
    save_profiles(profiles, &out_dir.join("speakers.tsv"))?;
    Ok(GeneratedCorpus { manifest, profiles: profiles.to_vec(), manifest_path })
}

/// `speaker_id<TAB>f0_hz<TAB>formant_scale<TAB>noise_floor`.
pub fn save_profiles(profiles: &[SpeakerProfile], path: &Path) -> Result<()> {
    let mut s = String::new();
    for p in profiles {
        let _ = writeln!(
            s,
            "{}\t{:.9}\t{:.9}\t{:.9}",
            p.speaker_id, p.voice.f0_hz, p.voice.formant_scale, p.voice.noise_floor
        );
    }
    crate::io::write_atomic(path, s.as_bytes())
}

pub fn load_profiles(path: &Path) -> Result<Vec<SpeakerProfile>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("line {}: bad field {i}", n + 1)))
            };
            if f.len() != 4 {
                return Err(Error::format(path, format!("line {}: expected 4 fields", n + 1)));
            }
            Ok(SpeakerProfile {
                speaker_id: f[0].to_string(),
                voice: VoiceParams { f0_hz: num(1)?, formant_scale: num(2)?, noise_floor: num(3)? },
            })
        })
        .collect()
}

/// Column means of features computed on noise-only audio at each speaker's
/// noise floor: the feature-space picture of "empty audio".
pub fn silence_mean(profiles: &[SpeakerProfile], frame: &FrameConfig, frames: usize, seed: u64) -> Result<Vec<f64>> {
    let analyzer = Analyzer::new(*frame)?;
    let mut acc = vec![0.0; FEATURE_DIM];
    let len = render::samples_for_frames(frames, frame);
    for (i, p) in profiles.iter().enumerate() {
        let mut rng = utterance_rng(seed, i, usize::MAX >> 32);
        let normal = Normal::new(0.0, p.voice.noise_floor.max(1e-6)).expect("valid std");
        let wave: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        let f: Matrix<f64> = analyzer.features(&wave)?;
        for (a, m) in acc.iter_mut().zip(f.col_mean()) {
            *a += m;
        }
    }
    let n = profiles.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}
