//! The eight pipeline stages. Each stage owns one directory below the output
//! root, reads only the directories of its dependencies and is recorded in
//! the run ledger.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ghostvec::asr::model::{decode_greedy, encode};
use ghostvec::asr::train::load_examples;
use ghostvec::asr::{corpus_cer, load_model, save_model, speaker_token_accuracy, train, AsrModel, TrainConfig, EOS};
use ghostvec::attack::{extract_ghostvec, load_bundle, save_bundle, AttackConfig, NoiseSpec};
use ghostvec::corpus::{
    feature_file, generate_corpus, generate_for_profiles, load_manifest, load_profiles, random_transcript,
    sample_profiles, save_manifest, silence_mean, Analyzer, CorpusConfig, Manifest, ManifestEntry,
};
use ghostvec::io::{digest_bytes, read_matrix, read_wav, write_atomic, write_matrix, write_wav};
use ghostvec::linalg::cosine_similarity;
use ghostvec::metrics::trials::{format_trials, TrialScoreSet};
use ghostvec::metrics::{
    build_report, load_encoder, project_2d, save_encoder, score_trials, train_speaker_encoder, SpeakerEncoder, SvConfig,
    SvExample, Trial, TrialLabel,
};
use ghostvec::svd_transfer::{sanitize, stack_ghostvecs, transfer_report, TemplateBank};
use ghostvec::synthesis::{
    format_requests, parse_requests, RequestLine, SynthConfig, SynthesisRequest, Synthesizer, VoiceMap,
};
use ghostvec::{Matrix, Real};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::ledger::{digest_tree, Ledger, Record, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Corpus,
    TrainAsr,
    TrainSv,
    Attack,
    SvdTransfer,
    Synth,
    Score,
    Report,
}

pub const ALL: [Stage; 8] = [
    Stage::Corpus,
    Stage::TrainAsr,
    Stage::TrainSv,
    Stage::Attack,
    Stage::SvdTransfer,
    Stage::Synth,
    Stage::Score,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Corpus => "corpus",
            Self::TrainAsr => "train-asr",
            Self::TrainSv => "train-sv",
            Self::Attack => "attack",
            Self::SvdTransfer => "svd-transfer",
            Self::Synth => "synth",
            Self::Score => "score",
            Self::Report => "report",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Self::Corpus => "corpus",
            Self::TrainAsr => "asr",
            Self::TrainSv => "sv",
            Self::Attack => "attack",
            Self::SvdTransfer => "svd",
            Self::Synth => "synth",
            Self::Score => "score",
            Self::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Corpus => &[],
            TrainAsr | TrainSv => &[Corpus],
            Attack => &[Corpus, TrainAsr],
            SvdTransfer => &[Corpus, TrainAsr, Attack],
            Synth => &[Corpus, Attack, SvdTransfer],
            Score => &[Corpus, TrainAsr, TrainSv, Attack, Synth],
            Report => &[Attack, SvdTransfer, Score],
        }
    }

    /// File written last by the stage; its presence marks completion.
    pub fn product(self) -> &'static str {
        match self {
            Self::Corpus => "corpus/train/manifest.tsv",
            Self::TrainAsr => "asr/asr.ckpt",
            Self::TrainSv => "sv/encoder.json",
            Self::Attack => "attack/summary.json",
            Self::SvdTransfer => "svd/transfer.tsv",
            Self::Synth => "synth/manifest.tsv",
            Self::Score => "score/extras.json",
            Self::Report => "report/report.json",
        }
    }

    /// Digest of the configuration values this stage reads.
    pub fn config_digest(self, cfg: &PipelineConfig) -> String {
        let v = match self {
            Self::Corpus => serde_json::json!({ "seed": cfg.seed, "corpus": cfg.corpus }),
            Self::TrainAsr => serde_json::json!({ "seed": cfg.seed, "asr": cfg.asr }),
            Self::TrainSv => serde_json::json!({ "seed": cfg.seed, "sv": cfg.sv, "held_out": held_out(cfg) }),
            Self::Attack => serde_json::json!({ "seed": cfg.seed, "attack": cfg.attack, "frame": cfg.corpus.frame }),
            Self::SvdTransfer => serde_json::json!({ "seed": cfg.seed, "svd": cfg.svd }),
            Self::Synth => serde_json::json!({
                "seed": cfg.seed,
                "synth": cfg.synth,
                "enroll_utts": cfg.metrics.enroll_utts,
                "corpus": cfg.corpus,
            }),
            Self::Score => serde_json::json!({ "metrics": cfg.metrics, "held_out": held_out(cfg) }),
            Self::Report => serde_json::json!({}),
        };
        digest_bytes(v.to_string().as_bytes())[..16].to_string()
    }
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        ALL.into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s}")))
    }
}

/// Utterances per training speaker kept out of speaker-encoder training:
/// enrollment plus held-in genuine test utterances.
fn held_out(cfg: &PipelineConfig) -> usize {
    cfg.metrics.enroll_utts + cfg.synth.utts_per_target
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Caller-supplied synthesis request table.
    pub requests: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

pub fn run_stage(ctx: &Ctx, ledger: &mut Ledger, stage: Stage) -> Result<Status, CliError> {
    for dep in stage.deps() {
        let p = ctx.path(dep.product());
        if !p.exists() {
            return Err(CliError::Missing(format!("{} (run `{}` first)", p.display(), dep.name())));
        }
    }
    let config_digest = stage.config_digest(&ctx.cfg);
    let mut inputs = BTreeMap::new();
    for dep in stage.deps() {
        inputs.extend(digest_tree(&ctx.out, &ctx.path(dep.dir()))?);
    }
    if let (Stage::Synth, Some(req)) = (stage, &ctx.requests) {
        let key = std::fs::canonicalize(req).unwrap_or_else(|_| req.clone());
        let digest = ghostvec::io::digest_file(req)
            .map_err(|_| CliError::Missing(format!("{}", req.display())))?;
        inputs.insert(key.to_string_lossy().into_owned(), digest);
    }
    let dir = ctx.path(stage.dir());
    if !ctx.force {
        if let Some(prev) = ledger.last_done(stage.name()) {
            if prev.config_digest == config_digest
                && prev.inputs == inputs
                && !prev.outputs.is_empty()
                && digest_tree(&ctx.out, &dir)? == prev.outputs
            {
                ledger.append(Record {
                    stage: stage.name().into(),
                    status: Status::CacheHit,
                    config_digest,
                    inputs,
                    outputs: BTreeMap::new(),
                    wall_ms: 0,
                    message: None,
                })?;
                return Ok(Status::CacheHit);
            }
        }
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let start = Instant::now();
    let result = execute(ctx, stage);
    let wall_ms = start.elapsed().as_millis() as u64;
    let (status, outputs, message) = match &result {
        Ok(()) => (Status::Done, digest_tree(&ctx.out, &dir)?, None),
        Err(e) => (Status::Failed, BTreeMap::new(), Some(e.to_string())),
    };
    ledger.append(Record { stage: stage.name().into(), status, config_digest, inputs, outputs, wall_ms, message })?;
    result.map(|()| status)
}

fn execute(ctx: &Ctx, stage: Stage) -> Result<(), CliError> {
    match stage {
        Stage::Corpus => corpus(ctx),
        Stage::TrainAsr => train_asr(ctx),
        Stage::TrainSv => train_sv(ctx),
        Stage::Attack => attack(ctx),
        Stage::SvdTransfer => svd_transfer(ctx),
        Stage::Synth => synth(ctx),
        Stage::Score => score(ctx),
        Stage::Report => report(ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(write_atomic(path, s.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn corpus_config(cfg: &PipelineConfig) -> CorpusConfig {
    let c = &cfg.corpus;
    CorpusConfig {
        n_speakers: c.n_speakers,
        utts_per_speaker: c.utts_per_speaker,
        transcript_len: c.transcript_len,
        seed: cfg.stage_seed("corpus"),
        frames_per_char: c.frames_per_char,
        min_separation: c.min_separation,
        ranges: c.ranges,
        frame: c.frame,
    }
}

fn corpus(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("templates"));
    let c = &cfg.corpus;
    let profiles = sample_profiles(c.template_speakers, "tpl", &c.ranges, c.min_separation, &mut rng)?;
    let tcfg = CorpusConfig { utts_per_speaker: c.template_utts, seed: cfg.stage_seed("templates"), ..corpus_config(cfg) };
    generate_for_profiles(&profiles, &tcfg, &ctx.path("corpus/templates"), "tpl")?;
    // the training manifest is the stage's completion marker, so it goes last
    generate_corpus(&corpus_config(cfg), &ctx.path("corpus/train"))?;
    Ok(())
}

struct Corpus {
    manifest: Manifest,
    manifest_path: PathBuf,
}

fn load_corpus(ctx: &Ctx, name: &str) -> Result<Corpus, CliError> {
    let manifest_path = ctx.path(&format!("corpus/{name}/manifest.tsv"));
    Ok(Corpus { manifest: load_manifest(&manifest_path)?, manifest_path })
}

#[derive(Serialize, Deserialize)]
struct AsrSummary {
    epoch_losses: Vec<f64>,
    steps: usize,
    parameters: usize,
    speaker_accuracy: f64,
    checksum: String,
}

fn train_asr(ctx: &Ctx) -> Result<(), CliError> {
    let c = load_corpus(ctx, "train")?;
    let a = &ctx.cfg.asr;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: ctx.cfg.stage_seed("train-asr"),
        optimizer: a.optimizer,
    };
    let (model, report) = train::<Real>(&c.manifest, &c.manifest_path, &a.model, &tcfg, |e, l| {
        eprintln!("train-asr: epoch {} loss {l:.4}", e + 1)
    })?;
    let examples = load_examples::<Real>(&c.manifest, &c.manifest_path, model.vocab())?;
    let speaker_accuracy = speaker_token_accuracy(&model, &examples)?;
    eprintln!("train-asr: speaker-token accuracy {speaker_accuracy:.4}");
    write_json(
        &ctx.path("asr/train.json"),
        &AsrSummary {
            epoch_losses: report.epoch_losses,
            steps: report.steps,
            parameters: report.parameters,
            speaker_accuracy,
            checksum: model.checksum(),
        },
    )?;
    save_model(&model, &ctx.path("asr/asr.ckpt"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SvSummary {
    train_accuracy: f64,
    train_utterances: usize,
    checksum: String,
}

fn train_sv(ctx: &Ctx) -> Result<(), CliError> {
    let c = load_corpus(ctx, "train")?;
    let speakers: Vec<String> = c.manifest.speaker_set.iter().cloned().collect();
    let skip = held_out(&ctx.cfg);
    let mut examples = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        for e in c.manifest.by_speaker(spk).skip(skip) {
            let features = read_matrix::<Real>(&feature_file(&c.manifest_path, e))?;
            examples.push(SvExample { features, speaker: si });
        }
    }
    let s = &ctx.cfg.sv;
    let svcfg = SvConfig {
        hidden: s.hidden,
        embed_dim: s.embed_dim,
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed: ctx.cfg.stage_seed("train-sv"),
        optimizer: s.optimizer,
    };
    let (enc, acc) = train_speaker_encoder(&examples, speakers, &svcfg)?;
    eprintln!("train-sv: training accuracy {acc:.4} on {} utterances", examples.len());
    write_json(
        &ctx.path("sv/train.json"),
        &SvSummary { train_accuracy: acc, train_utterances: examples.len(), checksum: enc.checksum() },
    )?;
    save_encoder(&enc, &ctx.path("sv/encoder.json"))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub success_rate: f64,
    pub mean_iters: f64,
    pub centroid_cosine_own: f64,
    pub nearest_speaker: String,
    pub clustered: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config_digest: String,
    pub targets: Vec<TargetSummary>,
    pub clustered_targets: usize,
}

fn select_targets(cfg: &PipelineConfig, speakers: &[String]) -> Result<Vec<String>, CliError> {
    let a = &cfg.attack;
    if !a.targets.is_empty() {
        if let Some(t) = a.targets.iter().find(|t| !speakers.contains(t)) {
            return Err(CliError::Config(format!("attack target {t} is not a corpus speaker")));
        }
        return Ok(a.targets.clone());
    }
    let n = speakers.len();
    Ok((0..a.n_targets).map(|i| speakers[i * n / a.n_targets].clone()).collect())
}

/// Pooled ASR encoder output of every utterance, in manifest order.
fn pooled_embeddings(model: &AsrModel<Real>, c: &Corpus) -> Result<Matrix<f64>, CliError> {
    let mut rows = Vec::with_capacity(c.manifest.len());
    for e in &c.manifest.entries {
        let x = read_matrix::<Real>(&feature_file(&c.manifest_path, e))?;
        rows.push(encode(model, &x)?.col_mean().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    }
    Ok(Matrix::from_rows(&rows)?)
}

fn centroids(manifest: &Manifest, pooled: &Matrix<f64>) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let (s, n) = sums.entry(e.speaker_id.clone()).or_insert_with(|| (vec![0.0; pooled.cols()], 0));
        s.iter_mut().zip(pooled.row(i)).for_each(|(a, b)| *a += b);
        *n += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect())).collect()
}

fn attack(ctx: &Ctx) -> Result<(), CliError> {
    let c = load_corpus(ctx, "train")?;
    let model: AsrModel<Real> = load_model(&ctx.path("asr/asr.ckpt"))?;
    let profiles = load_profiles(&ctx.path("corpus/train/speakers.tsv"))?;
    let speakers: Vec<String> = c.manifest.speaker_set.iter().cloned().collect();
    let targets = select_targets(&ctx.cfg, &speakers)?;
    let a = &ctx.cfg.attack;
    let seed = ctx.cfg.stage_seed("attack");
    let mean = silence_mean(&profiles, &ctx.cfg.corpus.frame, a.frames, seed)?;
    let base = AttackConfig {
        epsilon: a.epsilon,
        max_iters: a.max_iters,
        frames: a.frames,
        noise: NoiseSpec { mean, std: a.noise_std },
        budget: a.budget,
        seed,
        full_sequence_loss: a.full_sequence_loss,
        keep_embeddings: a.keep_embeddings,
    };
    base.validate()?;

    let pooled = pooled_embeddings(&model, &c)?;
    write_matrix(&ctx.path("attack/genuine_pooled.mat"), &pooled)?;
    let cents = centroids(&c.manifest, &pooled);

    let mut summaries = Vec::new();
    for (idx, t) in targets.iter().enumerate() {
        let cfg = AttackConfig { seed: seed.wrapping_add(idx as u64), ..base.clone() };
        let result = extract_ghostvec(&model, t, &cfg, a.variants)?;
        save_bundle(&ctx.path(&format!("attack/{t}.bundle")), &result.ghostvecs, t, &base.digest())?;
        let ok: Vec<_> = result.ghostvecs.iter().filter(|g| g.provenance.success).collect();
        let mut centroid = vec![0.0; pooled.cols()];
        for g in &ok {
            centroid.iter_mut().zip(&g.pooled).for_each(|(a, &b)| *a += f64::from(b) / ok.len() as f64);
        }
        let sims: Vec<(&String, f64)> = cents.iter().map(|(k, v)| (k, cosine_similarity(&centroid, v))).collect();
        let own = sims.iter().find(|(k, _)| *k == t).map_or(f64::NAN, |s| s.1);
        let nearest = sims.iter().fold(None::<&(&String, f64)>, |best, s| match best {
            Some(b) if b.1 >= s.1 => Some(b),
            _ => Some(s),
        });
        let nearest = nearest.map_or(String::new(), |s| s.0.clone());
        let clustered = !ok.is_empty() && sims.iter().all(|(k, s)| *k == t || *s < own);
        let mean_iters = result.ghostvecs.iter().map(|g| g.provenance.iters_used as f64).sum::<f64>()
            / result.ghostvecs.len().max(1) as f64;
        eprintln!(
            "attack: {t} success {:.2} mean iters {mean_iters:.2} own-centroid cosine {own:.3} nearest {nearest}",
            result.success_rate
        );
        summaries.push(TargetSummary {
            target: t.clone(),
            success_rate: result.success_rate,
            mean_iters,
            centroid_cosine_own: own,
            nearest_speaker: nearest,
            clustered,
        });
    }
    let clustered_targets = summaries.iter().filter(|s| s.clustered).count();
    write_json(
        &ctx.path("attack/summary.json"),
        &AttackSummary { config_digest: base.digest(), targets: summaries, clustered_targets },
    )
}

fn attack_targets(ctx: &Ctx) -> Result<Vec<String>, CliError> {
    let s: AttackSummary = read_json(&ctx.path("attack/summary.json"))?;
    Ok(s.targets.into_iter().map(|t| t.target).collect())
}

fn svd_transfer(ctx: &Ctx) -> Result<(), CliError> {
    let model: AsrModel<Real> = load_model(&ctx.path("asr/asr.ckpt"))?;
    let tpl = load_corpus(ctx, "templates")?;
    let pooled = pooled_embeddings(&model, &tpl)?;
    let rows = ctx.cfg.svd.rows;
    let seed = ctx.cfg.stage_seed("svd-transfer");
    let mut bank = TemplateBank::<f64>::new();
    for (si, spk) in tpl.manifest.speaker_set.iter().enumerate() {
        let idx: Vec<usize> = (0..tpl.manifest.len()).filter(|&i| &tpl.manifest.entries[i].speaker_id == spk).collect();
        bank.insert_resampled(spk, &pooled.select_rows(&idx), rows, seed.wrapping_add(si as u64))?;
    }
    bank.save(&ctx.path("svd/bank"))?;
    let mut outcomes = Vec::new();
    for t in attack_targets(ctx)? {
        let (_, ghosts) = load_bundle::<f64>(&ctx.path(&format!("attack/{t}.bundle")))?;
        let stacked = stack_ghostvecs(&ghosts, rows)?;
        let out = sanitize(&ghosts, rows, &bank)?;
        eprintln!("svd-transfer: {t} -> template {} (cosine distance {:.4})", out.template, out.distance);
        write_matrix(&ctx.path(&format!("svd/{t}.ghost.mat")), &stacked.x)?;
        write_matrix(&ctx.path(&format!("svd/{t}.modified.mat")), &out.modified)?;
        outcomes.push(out);
    }
    write_atomic(&ctx.path("svd/transfer.tsv"), transfer_report(&outcomes, 5).as_bytes())?;
    Ok(())
}

/// Condition prefixes of synthesized utterance ids and their report names.
pub const CONDITIONS: [(&str, &str); 3] = [("our", "Target/Our"), ("ghost", "Target/GhostVec"), ("genuine", "Target/Synth")];

/// Utterances per target synthesized from the target's mean genuine embedding.
const MEAN_UTTS: usize = 5;

fn claimed_speaker(utt_id: &str) -> Option<(&str, &str)> {
    let mut parts = utt_id.splitn(3, '-');
    Some((parts.next()?, parts.next()?))
}

fn default_requests(ctx: &Ctx, c: &Corpus) -> Result<Vec<RequestLine>, CliError> {
    let per = ctx.cfg.synth.utts_per_target;
    let enroll = ctx.cfg.metrics.enroll_utts;
    let targets = attack_targets(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.stage_seed("synth"));
    let texts: Vec<String> =
        (0..targets.len() * per).map(|_| random_transcript(ctx.cfg.corpus.transcript_len, &mut rng)).collect();
    let mut lines = Vec::new();
    for (ti, t) in targets.iter().enumerate() {
        let genuine: Vec<usize> = (0..c.manifest.len()).filter(|&i| &c.manifest.entries[i].speaker_id == t).collect();
        if genuine.len() < enroll + per {
            return Err(CliError::Config(format!("{t} has fewer than {} utterances", enroll + per)));
        }
        for k in 0..per {
            let text = &texts[ti * per + k];
            let sources = [
                ("our", format!("svd/{t}.modified.mat"), k),
                ("ghost", format!("svd/{t}.ghost.mat"), k),
                ("genuine", "attack/genuine_pooled.mat".to_string(), genuine[enroll + k]),
            ];
            for (cond, file, row) in sources {
                lines.push(RequestLine { utt_id: format!("{cond}-{t}-{k:02}"), text: text.clone(), embedding_file: file, row });
            }
            if k < MEAN_UTTS {
                let (utt_id, embedding_file) = (format!("mean-{t}-{k:02}"), "synth/genuine_means.mat".to_string());
                lines.push(RequestLine { utt_id, text: text.clone(), embedding_file, row: ti });
            }
        }
    }
    Ok(lines)
}

fn synth(ctx: &Ctx) -> Result<(), CliError> {
    let c = load_corpus(ctx, "train")?;
    let profiles = load_profiles(&ctx.path("corpus/train/speakers.tsv"))?;
    let voices: BTreeMap<&str, _> = profiles.iter().map(|p| (p.speaker_id.as_str(), p.voice)).collect();
    let pooled = read_matrix::<f64>(&ctx.path("attack/genuine_pooled.mat"))?;
    let per_utt: Vec<_> = c
        .manifest
        .entries
        .iter()
        .map(|e| voices.get(e.speaker_id.as_str()).copied().ok_or_else(|| CliError::Internal(format!("no profile for {}", e.speaker_id))))
        .collect::<Result<_, _>>()?;
    let map = VoiceMap::fit(&pooled, &per_utt, ctx.cfg.corpus.ranges, ctx.cfg.synth.ridge)?;
    map.save(&ctx.path("synth/voice_map.json"))?;

    let targets = attack_targets(ctx)?;
    let mut means: Matrix<f64> = Matrix::zeros(targets.len(), pooled.cols());
    for (ti, t) in targets.iter().enumerate() {
        let rows: Vec<usize> = (0..c.manifest.len()).filter(|&i| &c.manifest.entries[i].speaker_id == t).collect();
        for &i in &rows {
            for j in 0..pooled.cols() {
                means[(ti, j)] += pooled[(i, j)] / rows.len() as f64;
            }
        }
    }
    write_matrix(&ctx.path("synth/genuine_means.mat"), &means)?;

    let requests = match &ctx.requests {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
            parse_requests(&text, p)?
        }
        None => default_requests(ctx, &c)?,
    };
    write_atomic(&ctx.path("synth/requests.tsv"), format_requests(&requests).as_bytes())?;

    let scfg = SynthConfig {
        frames_per_char: ctx.cfg.corpus.frames_per_char,
        griffin_lim_iters: ctx.cfg.synth.griffin_lim_iters,
        frame: ctx.cfg.corpus.frame,
    };
    let synth = Synthesizer::new(map, scfg)?;
    let analyzer = Analyzer::new(scfg.frame)?;
    let mut sources: BTreeMap<String, Matrix<f64>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(requests.len());
    for r in &requests {
        if !sources.contains_key(&r.embedding_file) {
            let path = ctx.path(&r.embedding_file);
            if !path.exists() {
                return Err(CliError::Missing(path.display().to_string()));
            }
            sources.insert(r.embedding_file.clone(), read_matrix(&path)?);
        }
        let src = &sources[&r.embedding_file];
        if r.row >= src.rows() {
            return Err(CliError::Config(format!("{}: row {} of {} out of range", r.utt_id, r.row, r.embedding_file)));
        }
        let req = SynthesisRequest { text: r.text.clone(), embedding: src.row(r.row).to_vec() };
        let (mel, wave) = synth.synthesize(&req)?;
        let wav_path = ctx.path(&format!("synth/wav/{}.wav", r.utt_id));
        write_wav(&wav_path, &wave, scfg.frame.sample_rate)?;
        write_matrix(&ctx.path(&format!("synth/mel/{}.mat", r.utt_id)), &mel.frames)?;
        let (audio, _) = read_wav(&wav_path)?;
        let feats: Matrix<Real> = analyzer.features(&audio)?;
        let rel = PathBuf::from("feats").join(format!("{}.mat", r.utt_id));
        write_matrix(&ctx.path("synth").join(&rel), &feats)?;
        let speaker = claimed_speaker(&r.utt_id).map_or("unknown", |(_, s)| s);
        entries.push(ManifestEntry {
            utt_id: r.utt_id.clone(),
            speaker_id: speaker.to_string(),
            feature_path: rel,
            transcript: r.text.clone(),
        });
    }
    eprintln!("synth: {} utterances", entries.len());
    save_manifest(&Manifest::new(entries)?, &ctx.path("synth/manifest.tsv"))?;
    Ok(())
}

fn slug(condition: &str) -> String {
    condition.replace('/', "_")
}

fn embed(enc: &SpeakerEncoder<Real>, path: &Path) -> Result<Vec<f64>, CliError> {
    let x = read_matrix::<Real>(path)?;
    Ok(enc.embed(&x)?.into_iter().map(f64::from).collect())
}

/// Every test utterance against every enrolled speaker.
fn all_pairs_trials(tests: &[(String, String)], enrolled: &[String]) -> Vec<Trial> {
    let mut out = Vec::with_capacity(tests.len() * enrolled.len());
    for (utt, claimed) in tests {
        for spk in enrolled {
            let label = if spk == claimed { TrialLabel::Target } else { TrialLabel::Nontarget };
            out.push(Trial { enroll_id: spk.clone(), test_id: utt.clone(), label });
        }
    }
    out
}

fn decode_text(model: &AsrModel<Real>, x: &Matrix<Real>, max_len: usize) -> Result<(String, String), CliError> {
    let d = decode_greedy(model, &encode(model, x)?, max_len)?;
    let speaker = d.first().and_then(|t| model.vocab().speaker_of(t)).unwrap_or("-").to_string();
    let chars: Vec<usize> = d.tokens.iter().skip(1).copied().take_while(|&t| t != EOS).collect();
    Ok((speaker, model.vocab().text_of(&chars)))
}

fn score(ctx: &Ctx) -> Result<(), CliError> {
    let c = load_corpus(ctx, "train")?;
    let enc: SpeakerEncoder<Real> = load_encoder(&ctx.path("sv/encoder.json"))?;
    let model: AsrModel<Real> = load_model(&ctx.path("asr/asr.ckpt"))?;
    let m = &ctx.cfg.metrics;
    let per = ctx.cfg.synth.utts_per_target;
    let targets = attack_targets(ctx)?;
    let speakers: Vec<String> = c.manifest.speaker_set.iter().cloned().collect();

    let mut enroll: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut tests: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut natural: Vec<(String, String)> = Vec::new();
    let mut natural_pairs: Vec<(String, String)> = Vec::new();
    for spk in &speakers {
        for (k, e) in c.manifest.by_speaker(spk).enumerate().take(m.enroll_utts + per) {
            let path = feature_file(&c.manifest_path, e);
            if k < m.enroll_utts {
                enroll.entry(spk.clone()).or_default().push(embed(&enc, &path)?);
            } else if targets.contains(spk) {
                tests.insert(e.utt_id.clone(), embed(&enc, &path)?);
                natural.push((e.utt_id.clone(), spk.clone()));
                let (_, hyp) = decode_text(&model, &read_matrix(&path)?, m.decode_max_len)?;
                natural_pairs.push((hyp, e.transcript.clone()));
            }
        }
    }
    let mut sets: Vec<(String, Vec<(String, String)>)> = vec![("Target/Target".into(), natural)];

    let synth_manifest_path = ctx.path("synth/manifest.tsv");
    let synth = load_manifest(&synth_manifest_path)?;
    let mut decode_tsv = String::from("utt_id\tcondition\tpredicted_speaker\tsv_predicted_speaker\thypothesis\treference\n");
    let mut cer_pairs: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
    let mut id_hits: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (prefix, name) in CONDITIONS {
        let mut list = Vec::new();
        for e in &synth.entries {
            if claimed_speaker(&e.utt_id).map(|p| p.0) != Some(prefix) || !speakers.contains(&e.speaker_id) {
                continue;
            }
            let path = feature_file(&synth_manifest_path, e);
            let x = read_matrix::<Real>(&path)?;
            tests.insert(e.utt_id.clone(), enc.embed(&x)?.into_iter().map(f64::from).collect());
            list.push((e.utt_id.clone(), e.speaker_id.clone()));
            let (asr_spk, hyp) = decode_text(&model, &x, m.decode_max_len)?;
            let sv_spk = &enc.speakers()[enc.classify(&x)?];
            let hit = id_hits.entry(name).or_default();
            hit.0 += usize::from(sv_spk == &e.speaker_id);
            hit.1 += 1;
            let _ = writeln!(decode_tsv, "{}\t{name}\t{asr_spk}\t{sv_spk}\t{hyp}\t{}", e.utt_id, e.transcript);
            cer_pairs.entry(name).or_default().push((hyp, e.transcript.clone()));
        }
        sets.push((name.to_string(), list));
    }
    write_atomic(&ctx.path("score/decode.tsv"), decode_tsv.as_bytes())?;

    // speech synthesized from each target's mean genuine embedding, scored against the targets only
    let centers: Vec<Vec<f64>> = targets.iter().map(|t| mean_vector(&enroll[t])).collect();
    let mut transfer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); targets.len()];
    for e in &synth.entries {
        if claimed_speaker(&e.utt_id).map(|p| p.0) != Some("mean") {
            continue;
        }
        let Some(ti) = targets.iter().position(|t| t == &e.speaker_id) else { continue };
        let v = embed(&enc, &feature_file(&synth_manifest_path, e))?;
        transfer[ti].push(centers.iter().map(|c| cosine_similarity(&v, c)).collect());
    }

    for (name, list) in &sets {
        if list.is_empty() {
            return Err(CliError::Missing(format!("no synthesized utterances for condition {name}")));
        }
        let trials = all_pairs_trials(list, &speakers);
        write_atomic(&ctx.path(&format!("score/{}.trials.tsv", slug(name))), format_trials(&trials).as_bytes())?;
        let scored = score_trials(&enroll, &tests, &trials)?;
        write_atomic(&ctx.path(&format!("score/{}.scores.tsv", slug(name))), scored.to_tsv().as_bytes())?;
    }

    let cer_of = |pairs: &[(String, String)]| corpus_cer(pairs.iter().map(|(h, r)| (h.as_str(), r.as_str())));
    let mut cers = BTreeMap::new();
    cers.insert("Natural".to_string(), cer_of(&natural_pairs)?);
    for (key, name) in [("Target", "Target/Synth"), ("Our", "Target/Our"), ("GhostVec", "Target/GhostVec")] {
        if let Some(p) = cer_pairs.get(name) {
            cers.insert(key.to_string(), cer_of(p)?);
        }
    }
    write_json(&ctx.path("score/cer.json"), &cers)?;

    let asr: AsrSummary = read_json(&ctx.path("asr/train.json"))?;
    let sv: SvSummary = read_json(&ctx.path("sv/train.json"))?;
    let attack: AttackSummary = read_json(&ctx.path("attack/summary.json"))?;
    let mut extras = BTreeMap::new();
    extras.insert("asr_speaker_accuracy".to_string(), asr.speaker_accuracy);
    extras.insert("sv_train_accuracy".to_string(), sv.train_accuracy);
    let rates: Vec<f64> = attack.targets.iter().map(|t| t.success_rate).collect();
    extras.insert("attack_success_min".to_string(), rates.iter().copied().fold(f64::INFINITY, f64::min));
    extras.insert("attack_success_mean".to_string(), rates.iter().sum::<f64>() / rates.len().max(1) as f64);
    extras.insert("clustered_targets".to_string(), attack.clustered_targets as f64);
    for (name, (hits, n)) in &id_hits {
        let key = format!("sv_id_accuracy {name}");
        extras.insert(key, *hits as f64 / (*n).max(1) as f64);
    }
    if transfer.iter().all(|u| !u.is_empty()) {
        let (id, order) = transfer_gate(&transfer);
        extras.insert("transfer_id_accuracy".to_string(), id);
        extras.insert("transfer_pair_order".to_string(), order);
    }
    write_json(&ctx.path("score/extras.json"), &extras)
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x / rows.len() as f64;
        }
    }
    out
}

/// `scores[a][u][b]` is the score of utterance `u` synthesized for target `a`
/// against target `b`. Returns the closed-set identification rate and the
/// fraction of ordered pairs `(a, b)` whose mean score favours `a`.
fn transfer_gate(scores: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let n = scores.len();
    let (mut hits, mut total) = (0usize, 0usize);
    for (a, utts) in scores.iter().enumerate() {
        for s in utts {
            let best = (0..n).max_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap_or(a);
            hits += usize::from(best == a);
            total += 1;
        }
    }
    let mean = |a: usize, b: usize| scores[a].iter().map(|s| s[b]).sum::<f64>() / scores[a].len() as f64;
    let (mut ordered, mut pairs) = (0usize, 0usize);
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            ordered += usize::from(mean(a, a) > mean(a, b));
            pairs += 1;
        }
    }
    (hits as f64 / total.max(1) as f64, ordered as f64 / pairs.max(1) as f64)
}

fn report(ctx: &Ctx) -> Result<(), CliError> {
    let mut sets = Vec::new();
    for name in std::iter::once("Target/Target").chain(CONDITIONS.iter().map(|c| c.1)) {
        let path = ctx.path(&format!("score/{}.scores.tsv", slug(name)));
        let text = std::fs::read_to_string(&path).map_err(|_| CliError::Missing(path.display().to_string()))?;
        sets.push((name.to_string(), TrialScoreSet::from_tsv(&text, &path)?));
    }
    let cers: BTreeMap<String, f64> = read_json(&ctx.path("score/cer.json"))?;
    let extras: BTreeMap<String, f64> = read_json(&ctx.path("score/extras.json"))?;
    let bundle = build_report(&sets, &cers, extras)?;
    write_atomic(&ctx.path("report/report.txt"), bundle.to_text().as_bytes())?;

    let c = load_corpus(ctx, "train")?;
    let pooled = read_matrix::<f64>(&ctx.path("attack/genuine_pooled.mat"))?;
    let mut points = Vec::new();
    let targets = attack_targets(ctx)?;
    for (i, e) in c.manifest.entries.iter().enumerate() {
        if targets.contains(&e.speaker_id) {
            points.push((format!("genuine\t{}", e.speaker_id), pooled.row(i).to_vec()));
        }
    }
    for t in &targets {
        for (kind, file) in [("ghost", "ghost"), ("our", "modified")] {
            let m = read_matrix::<f64>(&ctx.path(&format!("svd/{t}.{file}.mat")))?;
            points.extend(m.iter_rows().map(|r| (format!("{kind}\t{t}"), r.to_vec())));
        }
    }
    let mut tsv = String::from("kind\tspeaker\tx\ty\n");
    for p in project_2d(&points)? {
        let _ = writeln!(tsv, "{}\t{:.9}\t{:.9}", p.label, p.x, p.y);
    }
    write_atomic(&ctx.path("report/projection.tsv"), tsv.as_bytes())?;
    println!("{}", bundle.to_text());
    write_atomic(&ctx.path("report/report.json"), bundle.to_json().as_bytes())?;
    Ok(())
}
