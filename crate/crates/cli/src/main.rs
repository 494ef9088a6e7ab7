//! `demoire`: train, evaluate, run and inspect Multi Level Hyper Vision Net models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use demoire::checkpoint::load_checkpoint;
use demoire::data;
use demoire::harness::{self, TrainConfig, TrainOptions};
use demoire::metrics::{evaluate_dataset, EvalOptions, MetricReport, ResultsTable, SplitRow};
use demoire::network::build_model;
use demoire::Error;

const SEED_ENV: &str = "DEMOIRE_SEED";

#[derive(Parser)]
#[command(name = "demoire", version, about = "Moire removal with a multi-level hypervision network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory with input/ and gt/ subdirectories.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one image or a directory of images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Reflect-pad inputs whose sides are not multiples of 8.
        #[arg(long)]
        pad: bool,
        /// Also write input|output strips.
        #[arg(long)]
        triptych: bool,
    },
    /// Train the four ablation variants and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter count and layer shapes of a config's model.
    Inspect {
        #[arg(long)]
        config: PathBuf,
    },
}

/// A failure tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

#[derive(Clone, Copy)]
enum Phase {
    Config,
    Data,
    Runtime,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Config => 1,
            Phase::Data => 2,
            Phase::Runtime => 3,
        }
    }
}

/// Errors with an unambiguous kind keep it; the rest take the phase they came from.
fn classify(phase: Phase) -> impl Fn(Error) -> Failure {
    move |error| {
        let code = match &error {
            Error::Config(_) => 1,
            Error::Ingest(_) => 2,
            Error::NonFinite { .. } | Error::Checkpoint(_) => 3,
            _ => phase.code(),
        };
        Failure { code, error }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let mut config = TrainConfig::from_file(path).map_err(|e| Failure {
        code: 1,
        error: e,
    })?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        config.seed = raw.trim().parse().map_err(|_| Failure {
            code: 1,
            error: Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")),
        })?;
        info!("seed overridden by {SEED_ENV}: {}", config.seed);
    }
    Ok(config)
}

fn write_report(path: &Path, report: &MetricReport) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Failure {
        code: 3,
        error: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, resume } => {
            let config = load_config(&config)?;
            let (train, val) = config.load_splits().map_err(classify(Phase::Data))?;
            info!("training on {} pairs, validating on {}", train.len(), val.len());
            let outcome = harness::train(&config, &train, &val, &TrainOptions { resume, stop_after: None })
                .map_err(classify(Phase::Runtime))?;
            if let Some(best) = outcome.best_val_psnr {
                println!("best validation PSNR {best:.4} dB");
            }
            println!("checkpoints in {}", config.checkpoint_dir.display());
        }
        Command::Eval { ckpt, data: dir, out } => {
            let loaded = load_checkpoint(&ckpt).map_err(classify(Phase::Runtime))?;
            let dataset = data::load_pairs(&dir).map_err(classify(Phase::Data))?;
            let label = dir.file_name().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            let options = EvalOptions {
                split_label: label,
                reflect_pad: true,
                ..EvalOptions::default()
            };
            let mut report = evaluate_dataset(&loaded.model, &dataset, &options).map_err(classify(Phase::Data))?;
            report.parameter_count = Some(loaded.sidecar.parameter_count);
            print!("{}", ResultsTable(&[SplitRow::from(&report)]));
            if let Some(out) = out {
                write_report(&out, &report)?;
            }
        }
        Command::Infer {
            ckpt,
            input,
            output,
            pad,
            triptych,
        } => {
            let loaded = load_checkpoint(&ckpt).map_err(classify(Phase::Runtime))?;
            let summary =
                harness::infer_paths(&loaded.model, &input, &output, pad, triptych).map_err(classify(Phase::Data))?;
            for path in &summary.written {
                println!("{}", path.display());
            }
            if summary.written.is_empty() {
                let detail = summary
                    .failed
                    .iter()
                    .map(|(p, e)| format!("{}: {e}", p.display()))
                    .collect::<Vec<_>>()
                    .join("; ");
                return Err(Failure {
                    code: 2,
                    error: Error::Ingest(format!("no image could be restored ({detail})")),
                });
            }
        }
        Command::Ablate { config, out } => {
            let config = load_config(&config)?;
            let (train, val) = config.load_splits().map_err(classify(Phase::Data))?;
            let report = harness::run_ablation(&config, &train, &val, &out).map_err(classify(Phase::Runtime))?;
            print!("{report}");
        }
        Command::Inspect { config } => {
            let config = load_config(&config)?;
            let model = build_model(&config.model, config.seed).map_err(classify(Phase::Config))?;
            print!("{}", harness::layer_table(&model));
            println!("parameters: {}", model.params().count());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.error);
            ExitCode::from(f.code)
        }
    }
}
