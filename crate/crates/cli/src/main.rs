mod config;
mod error;
mod ledger;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use error::CliError;
use ledger::{Ledger, Status};
use stages::{run_stage, Ctx, Stage, ALL};

#[derive(Parser)]
#[command(name = "ghostvec", version, about = "Speaker-identity leakage pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun even when the ledger records an unchanged completed run.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory (overrides `GHOSTVEC_OUT` and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct AttackFlags {
    /// Target speaker; repeat for several.
    #[arg(long = "target")]
    targets: Vec<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and template corpora.
    Corpus(Common),
    /// Train the speaker-adapted recognizer.
    TrainAsr(Common),
    /// Train the verification encoder.
    TrainSv(Common),
    /// Extract GhostVecs for the target speakers.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AttackFlags,
    },
    /// Transplant template factors onto the stacked GhostVecs.
    SvdTransfer(Common),
    /// Synthesize test audio from genuine, raw and modified embeddings.
    Synth {
        #[command(flatten)]
        common: Common,
        /// TSV of `utt_id, text, embedding-file, row`, paths relative to the output directory.
        #[arg(long)]
        requests: Option<PathBuf>,
    },
    /// Score verification trials and decode synthesized audio.
    Score(Common),
    /// Assemble the condition table.
    Report(Common),
    /// Run every stage in order, reusing completed ones.
    All(Common),
}

impl AttackFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if !self.targets.is_empty() {
            cfg.attack.targets = self.targets.clone();
        }
        if let Some(v) = self.epsilon {
            cfg.attack.epsilon = v;
        }
        if let Some(v) = self.max_iters {
            cfg.attack.max_iters = v;
        }
        if let Some(v) = self.variants {
            cfg.attack.variants = v;
        }
        if let Some(v) = self.frames {
            cfg.attack.frames = v;
        }
    }
}

fn build_ctx(common: &Common, flags: Option<&AttackFlags>, requests: Option<PathBuf>) -> Result<Ctx, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(f) = flags {
        f.apply(&mut cfg);
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("GHOSTVEC_OUT").map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("ghostvec-out"));
    std::fs::create_dir_all(&out)?;
    Ok(Ctx { cfg, out, force: common.force, requests })
}

fn run(cli: Cli) -> Result<(), (Option<Stage>, CliError)> {
    let (ctx, stages) = match cli.command {
        Command::Corpus(c) => (build_ctx(&c, None, None), vec![Stage::Corpus]),
        Command::TrainAsr(c) => (build_ctx(&c, None, None), vec![Stage::TrainAsr]),
        Command::TrainSv(c) => (build_ctx(&c, None, None), vec![Stage::TrainSv]),
        Command::Attack { common, flags } => (build_ctx(&common, Some(&flags), None), vec![Stage::Attack]),
        Command::SvdTransfer(c) => (build_ctx(&c, None, None), vec![Stage::SvdTransfer]),
        Command::Synth { common, requests } => (build_ctx(&common, None, requests), vec![Stage::Synth]),
        Command::Score(c) => (build_ctx(&c, None, None), vec![Stage::Score]),
        Command::Report(c) => (build_ctx(&c, None, None), vec![Stage::Report]),
        Command::All(c) => (build_ctx(&c, None, None), ALL.to_vec()),
    };
    let ctx = ctx.map_err(|e| (None, e))?;
    let mut ledger = Ledger::open(&ctx.out).map_err(|e| (None, e))?;
    for stage in stages {
        let status = run_stage(&ctx, &mut ledger, stage).map_err(|e| (Some(stage), e))?;
        let word = match status {
            Status::Done => "done",
            Status::CacheHit => "cache hit",
            Status::Failed => "failed",
        };
        eprintln!("[{}] {word}", stage.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("{}", e.machine_line(stage.map(Stage::name)));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
