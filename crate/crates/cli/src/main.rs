//! Command-line front end for the text diffusion engine: corpus prep,
//! training, sampling, evaluation, and decode-order tracing, all driven by
//! one flat config file plus a handful of override flags.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure
//! during optimization.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infodiff_core::schedules::ScheduleKind;

use commands::{cmd_eval, cmd_prep, cmd_sample, cmd_trace, cmd_train, CliError, EvalArgs, SampleArgs, TraceArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "infodiff", version, about = "Entropy-aware text diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat `key = value` lines); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_self_cond(v: &str) -> Result<bool, String> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on or off, got {:?}", other)),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a pair corpus; write vocabulary and entropy tables.
    Prep {
        #[command(flatten)]
        common: Common,
        /// Corpus file of `source<TAB>target` lines (default from config).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train a denoiser; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override schedule.kind (linear|cosine|sqrt|mi|info).
        #[arg(long, value_parser = schedule_kind)]
        schedule: Option<ScheduleKind>,
        /// Override schedule.lambda.
        #[arg(long)]
        lambda: Option<f64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate from a checkpoint with MBR over sampled candidates.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: <run_dir>/final.idif).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// File with one source text per line.
        #[arg(long)]
        source: PathBuf,
        /// Override sample.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override sample.candidates.
        #[arg(long)]
        candidates: Option<usize>,
        /// Override sample.self_cond (on|off).
        #[arg(long, value_parser = parse_self_cond)]
        self_cond: Option<bool>,
        /// Sample under a different schedule kind than the checkpoint's.
        #[arg(long, value_parser = schedule_kind)]
        schedule: Option<ScheduleKind>,
        /// Sample under a different lambda than the checkpoint's.
        #[arg(long)]
        lambda: Option<f64>,
        /// Output directory (default: <run_dir>/samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Hypotheses, one per line.
        #[arg(long)]
        hyps: PathBuf,
        /// References, aligned line by line.
        #[arg(long)]
        refs: PathBuf,
        /// candidates.txt from `sample`, for per-source diversity groups.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Report file (default: <run_dir>/report.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode-order report and BLEU-vs-step curve from trace files.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Trace directory (default: <run_dir>/samples/traces).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// References for the BLEU-vs-step curve.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Output directory (default: <run_dir>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn schedule_kind(v: &str) -> Result<ScheduleKind, String> {
    ScheduleKind::from_name(v).ok_or_else(|| format!("unknown schedule {:?} (linear|cosine|sqrt|mi|info)", v))
}

fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::Input)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn check_thread_cap() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("INFODIFF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Input(format!("INFODIFF_THREADS must be a positive integer, got {:?}", v)))?;
        if n == 0 {
            return Err(CliError::Input("INFODIFF_THREADS must be a positive integer".to_string()));
        }
        println!("threads: capped at {} (execution is single-worker)", n);
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    check_thread_cap()?;
    match Cli::parse().command {
        Command::Prep { common, corpus } => {
            let cfg = resolve_config(&common)?;
            cmd_prep(&cfg, corpus)
        }
        Command::Train { common, steps, schedule, lambda, resume } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(steps) = steps {
                cfg.steps = steps;
            }
            if let Some(kind) = schedule {
                cfg.schedule = kind;
            }
            if let Some(lambda) = lambda {
                cfg.lambda = lambda;
            }
            cmd_train(&cfg, resume)
        }
        Command::Sample { common, checkpoint, source, steps, candidates, self_cond, schedule, lambda, out } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(steps) = steps {
                cfg.sample_steps = steps;
            }
            if let Some(candidates) = candidates {
                cfg.candidates = candidates;
            }
            if let Some(sc) = self_cond {
                cfg.self_cond = sc;
            }
            cmd_sample(&cfg, &SampleArgs { checkpoint, source, out, schedule, lambda })
        }
        Command::Eval { common, hyps, refs, samples, out } => {
            let cfg = resolve_config(&common)?;
            cmd_eval(&cfg, &EvalArgs { hyps, refs, samples, out })
        }
        Command::Trace { common, dir, references, out } => {
            let cfg = resolve_config(&common)?;
            cmd_trace(&cfg, &TraceArgs { dir, references, out })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
