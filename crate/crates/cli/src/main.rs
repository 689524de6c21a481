//! `synthamt`: render synthetic training data, pre-train and fine-tune the
//! transcriber, transcribe recordings and score transcriptions.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use synthamt::training::FineTuneMode;

use crate::commands::{Env, FinetuneArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "synthamt", version, about = "Music transcription trained on synthetic audio")]
struct Cli {
    /// Worker threads for rendering, transcription and evaluation (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress every this many training steps (0: never).
    #[arg(long, global = true, default_value_t = 10)]
    log_every: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref())?.with_seed(self.seed))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Confusion,
    Adaptation,
}

impl From<Mode> for FineTuneMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Confusion => FineTuneMode::Confusion,
            Mode::Adaptation => FineTuneMode::Adaptation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic (audio, notes) pairs from a MIDI pool and sample bank.
    Render {
        #[command(flatten)]
        run: RunArgs,
        /// Number of examples, overriding the config.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Pre-train on synthetic data.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Rendered dataset directory, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total step count, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained model against unannotated real recordings.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Pre-trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of real recordings (WAV).
        #[arg(long)]
        real: Option<PathBuf>,
        /// Synthetic dataset directory, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a fine-tuning checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transcribe WAV files (or directories of them) to MIDI.
    Transcribe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score estimated MIDI files against references with matching names.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write evaluation.json and run.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic sample bank, MIDI pool and config for trying things out.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        tracks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the token vocabulary as JSON.
    Vocab,
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    let env = Env {
        threads: cli.threads,
        log_every: cli.log_every,
    };
    match cli.command {
        Command::Render { run, count } => {
            let mut cfg = run.load()?;
            if let Some(n) = count {
                cfg.render.count = n;
            }
            commands::render(&cfg, &run.out, &env)?;
        }
        Command::Train {
            run,
            data,
            steps,
            resume,
        } => {
            let mut cfg = run.load()?;
            if data.is_some() {
                cfg.train.data = data;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            commands::train(&cfg, &run.out, resume.as_deref(), &env)?;
        }
        Command::Finetune {
            run,
            mode,
            checkpoint,
            real,
            data,
            steps,
            resume,
        } => {
            let mut cfg = run.load()?;
            if data.is_some() {
                cfg.finetune.synthetic = data;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            let args = FinetuneArgs {
                mode: mode.map(Into::into),
                checkpoint: checkpoint.as_deref(),
                real: real.as_deref(),
                resume: resume.as_deref(),
            };
            commands::finetune(&cfg, &run.out, &args, &env)?;
        }
        Command::Transcribe { run, checkpoint, inputs } => {
            let cfg = run.load()?;
            let (_, done, failed) = commands::transcribe(&cfg, &checkpoint, &inputs, &run.out, &env)?;
            for o in &done {
                println!("{} -> {} ({} segments, {} notes)", o.input.display(), o.output.display(), o.segments, o.notes.len());
            }
            if failed > 0 {
                return Err(CliError::Partial {
                    failed,
                    total: failed + done.len(),
                });
            }
        }
        Command::Evaluate { est, reference, out } => {
            let e = commands::evaluate(&est, &reference, out.as_deref(), &env)?;
            for n in &e.unpaired {
                eprintln!("unpaired: {n}");
            }
            print!("{}", e.table);
        }
        Command::Fixtures { out, tracks, seed } => {
            let cfg = commands::fixtures(&out, tracks, seed)?;
            println!("{}", cfg.display());
        }
        Command::Vocab => {
            println!("{}", serde_json::to_string_pretty(&synthamt::tokens::vocab_json()).expect("serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SYNTHAMT_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
