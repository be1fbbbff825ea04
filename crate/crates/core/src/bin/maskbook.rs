use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use maskbook::cli::{self, ExperimentConfig, MisiFiles, MisiInit, Outcome, RunOptions};

/// Codebook-based complex masks: oracle studies, codebook optimization,
/// MISI, direct-logit fitting and evaluation.
#[derive(Parser, Debug)]
#[command(name = "maskbook", version)]
struct Args {
    /// Experiment configuration (key = value lines with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Oracle masks with noisy, true and quantized phase.
    OracleStudy,
    /// EM / k-means codebook optimization.
    OptimizeCodebook,
    /// Fit per-bin logits of one utterance by gradient descent.
    Fit,
    /// Phase reconstruction from magnitudes. Without --mixture it runs on
    /// the configured corpus with oracle-mask magnitudes.
    Misi {
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_parser = parse_init)]
        init: Option<MisiInit>,
        /// Mixture WAV file.
        #[arg(long)]
        mixture: Option<PathBuf>,
        /// Magnitude grid per source (binary time-frequency file).
        #[arg(long = "magnitude")]
        magnitudes: Vec<PathBuf>,
        /// Initial phase grid per source for --init provided.
        #[arg(long = "phase")]
        phases: Vec<PathBuf>,
    },
    /// Score estimates `{id}_s{k}.wav` against the configured corpus.
    Eval {
        #[arg(long)]
        estimates: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck,
    /// Write a synthetic corpus with its manifest.
    Synth,
}

fn parse_init(s: &str) -> std::result::Result<MisiInit, String> {
    s.parse().map_err(|e: maskbook::Error| e.to_string())
}

fn run(args: Args) -> Result<Outcome> {
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let opts = RunOptions {
        seed: args.seed,
        out: args.out.clone(),
    };
    let outcome = match args.command {
        Command::OracleStudy => cli::run_oracle_study(&cfg, &opts)?,
        Command::OptimizeCodebook => cli::optimize_codebook(&cfg, &opts)?,
        Command::Fit => cli::fit(&cfg, &opts)?,
        Command::Misi {
            iters,
            init,
            mixture,
            magnitudes,
            phases,
        } => match mixture {
            Some(mixture) => {
                let files = MisiFiles {
                    mixture,
                    magnitudes,
                    phases,
                    iterations: iters,
                    init,
                };
                cli::misi_files(&cfg, &opts, &files)?
            }
            None => {
                let mut cfg = cfg;
                if let Some(k) = iters {
                    cfg.misi.iterations = vec![k];
                }
                if let Some(init) = init {
                    cfg.misi.init = init;
                }
                cli::misi_corpus(&cfg, &opts)?
            }
        },
        Command::Eval { estimates } => cli::eval(&cfg, &opts, estimates.as_deref())?,
        Command::Gradcheck => cli::gradcheck(&cfg, &opts)?,
        Command::Synth => cli::synth(&cfg, &opts)?,
    };
    Ok(outcome)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASKBOOK_LOG", "warn")).init();
    let args = Args::parse();
    match run(args) {
        Ok(outcome) => {
            for f in &outcome.files {
                info!("wrote {}", f.display());
            }
            for flag in &outcome.flags {
                if flag.exceeded() {
                    warn!("{} = {:.3e} exceeds {:.3e}", flag.name, flag.value, flag.limit);
                }
            }
            if outcome.ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
