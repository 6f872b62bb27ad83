//! Pipeline configuration: one TOML file, one table per stage, unknown keys
//! rejected. Every stage seed is derived from the single global `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ghostvec::asr::ModelConfig;
use ghostvec::corpus::{FrameConfig, VoiceRanges};
use ghostvec::nn::AdamConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output directory; `GHOSTVEC_OUT` and `--out` take precedence.
    pub out: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub asr: AsrSection,
    pub sv: SvSection,
    pub attack: AttackSection,
    pub svd: SvdSection,
    pub synth: SynthSection,
    pub metrics: MetricsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: None,
            corpus: CorpusSection::default(),
            asr: AsrSection::default(),
            sv: SvSection::default(),
            attack: AttackSection::default(),
            svd: SvdSection::default(),
            synth: SynthSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub transcript_len: (usize, usize),
    pub frames_per_char: usize,
    pub min_separation: f64,
    pub ranges: VoiceRanges,
    pub frame: FrameConfig,
    /// Held-out speakers rendered for the template bank.
    pub template_speakers: usize,
    pub template_utts: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = ghostvec::corpus::CorpusConfig::default();
        Self {
            n_speakers: c.n_speakers,
            utts_per_speaker: c.utts_per_speaker,
            transcript_len: c.transcript_len,
            frames_per_char: c.frames_per_char,
            min_separation: c.min_separation,
            ranges: c.ranges,
            frame: c.frame,
            template_speakers: 24,
            template_utts: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrSection {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for AsrSection {
    fn default() -> Self {
        let t = ghostvec::asr::TrainConfig::default();
        Self { model: ModelConfig::default(), epochs: t.epochs, batch_size: t.batch_size, optimizer: t.optimizer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvSection {
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for SvSection {
    fn default() -> Self {
        let s = ghostvec::metrics::SvConfig::default();
        Self { hidden: s.hidden, embed_dim: s.embed_dim, epochs: s.epochs, batch_size: s.batch_size, optimizer: s.optimizer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub frames: usize,
    /// Standard deviation of the noise around the corpus silence mean.
    pub noise_std: f64,
    pub budget: Option<f64>,
    pub full_sequence_loss: bool,
    pub keep_embeddings: bool,
    /// Explicit target speakers; empty selects `n_targets` evenly spaced ones.
    pub targets: Vec<String>,
    pub n_targets: usize,
    pub variants: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = ghostvec::attack::AttackConfig::default();
        Self {
            epsilon: a.epsilon,
            max_iters: a.max_iters,
            frames: a.frames,
            noise_std: a.noise.std,
            budget: a.budget,
            full_sequence_loss: a.full_sequence_loss,
            keep_embeddings: a.keep_embeddings,
            targets: Vec::new(),
            n_targets: 6,
            variants: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvdSection {
    /// Rows `N` of the stacked GhostVec and template matrices.
    pub rows: usize,
}

impl Default for SvdSection {
    fn default() -> Self {
        Self { rows: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub griffin_lim_iters: usize,
    /// Ridge strength of the embedding-to-voice regression, relative to the
    /// mean Gram diagonal.
    pub ridge: f64,
    /// Synthesized test sentences per target.
    pub utts_per_target: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { griffin_lim_iters: 32, ridge: 1e-3, utts_per_target: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Genuine enrollment utterances per speaker.
    pub enroll_utts: usize,
    pub decode_max_len: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { enroll_utts: 10, decode_max_len: 40 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let c = &self.corpus;
        if c.template_speakers == 0 || c.template_utts == 0 {
            return bad("corpus.template_speakers and corpus.template_utts must be positive".into());
        }
        let a = &self.attack;
        if a.targets.is_empty() && (a.n_targets == 0 || a.n_targets > c.n_speakers) {
            return bad(format!("attack.n_targets must be in 1..={}", c.n_speakers));
        }
        if a.variants < self.svd.rows {
            return bad(format!("attack.variants {} < svd.rows {}", a.variants, self.svd.rows));
        }
        if self.synth.utts_per_target == 0 || self.synth.utts_per_target > self.svd.rows {
            return bad("synth.utts_per_target must be in 1..=svd.rows".into());
        }
        let held_in = self.metrics.enroll_utts + self.synth.utts_per_target;
        if self.metrics.enroll_utts == 0 || held_in > c.utts_per_speaker {
            return bad(format!(
                "metrics.enroll_utts + synth.utts_per_target = {held_in} exceeds corpus.utts_per_speaker"
            ));
        }
        Ok(())
    }

    /// Seed for one stage, derived from the global seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
