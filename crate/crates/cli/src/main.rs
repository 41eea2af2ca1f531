use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use docrebench::report::Format;
use docrebench::{cmd_evaluate, cmd_reconstruct, cmd_report, cmd_run, cmd_synth, CliError};

#[derive(Parser)]
#[command(name = "docrebench", version, about = "Evaluate and reconstruct OCR'd document layouts")]
struct Cli {
    /// Log level (error, warn, info, debug, trace); RUST_LOG also works.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score predictions against ground truth, paired by image id.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Render a predicted document as HTML.
    Reconstruct {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate ground truth, perturbed predictions and expected scores.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a stage pipeline over a directory of inputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Documents processed at once (default: DOCREBENCH_WORKERS, then
        /// the largest stage worker count).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Aggregate a per-image scores CSV into a per-domain table.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

fn default_workers() -> usize {
    std::env::var(docrebench_core::pipeline::WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(docrebench_core::pipeline::DEFAULT_WORKERS)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Cmd::Evaluate {
            gt,
            pred,
            out,
            format,
            workers,
        } => {
            let ev = cmd_evaluate(&gt, &pred, &out, format, workers.max(1))?;
            for d in &ev.outcome.diagnostics {
                eprintln!("{d}");
            }
            println!("scored {} document(s) into {}", ev.scores.len(), out.display());
            Ok(ev.outcome.exit_code())
        }
        Cmd::Reconstruct { pred, out } => {
            let html = cmd_reconstruct(&pred, &out)?;
            println!("{}", html.display());
            Ok(0)
        }
        Cmd::Synth { spec, out, seed } => {
            let n = cmd_synth(&spec, &out, seed)?;
            println!("wrote {n} fixture(s) to {}", out.display());
            Ok(0)
        }
        Cmd::Run {
            config,
            inputs,
            out,
            workers,
        } => {
            let outcome = cmd_run(&config, &inputs, &out, workers)?;
            for d in &outcome.diagnostics {
                eprintln!("{d}");
            }
            Ok(outcome.exit_code())
        }
        Cmd::Report { scores, format } => {
            print!("{}", cmd_report(&scores, format)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
