//! `oxyspec` command line: simulate, train, evaluate, infer and bench.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oxyspec::network::Variant;
use oxyspec::{Error, ErrorKind, Result};

use crate::commands::EvaluateArgs;
use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "oxyspec", version, about = "Tissue oxygenation from multispectral reflectance")]
struct Cli {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads for every stage.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset, plus pseudo-real pools when configured.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of simulated samples, overriding `dataset.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a regressor and write the model and its epoch history.
    Train {
        /// fcn, cnn, da-fcn or da-cnn.
        #[arg(long)]
        variant: Variant,
        /// Simulated training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Real-domain dataset, required by the adversarial variants.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// History log; defaults to the model path with a `.history` extension.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Report MSE on a labeled dataset and/or the lactate fit of a manifest.
    Evaluate {
        /// Model file, or `unmixing`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding `<frame_id>.cube` files.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// `frame_id,site_kind,x,y,lactate_mmol_per_l` rows.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `band,value` light source reference.
        #[arg(long)]
        light: Option<PathBuf>,
        /// Measured points and fitted curve as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute an oxygenation map for one frame.
    Infer {
        /// Model file, or `unmixing`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        dark: Option<PathBuf>,
        /// `band,value` light source reference.
        #[arg(long)]
        light: Option<PathBuf>,
        /// PNG path; the float sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time full-frame inference of each method on one shared frame.
    Bench {
        /// Model file or `unmixing`; repeat for several methods.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        frame: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Key-value report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(cfg.finalize(cli.seed, cli.threads))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::config(format!("cannot size thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate { out, count } => commands::simulate(&cfg, *count, out),
        Command::Train { variant, data, real, out, history } => {
            commands::train(&cfg, *variant, data, real.as_deref(), out, history.as_deref())
        }
        Command::Evaluate { model, data, frames, manifest, light, out } => commands::evaluate(
            &cfg,
            &EvaluateArgs {
                model,
                data: data.as_deref(),
                frames: frames.as_deref(),
                manifest: manifest.as_deref(),
                light: light.as_deref(),
                out: out.as_deref(),
            },
        ),
        Command::Infer { model, frame, dark, light, out } => {
            commands::infer(&cfg, model, frame, dark.as_deref(), light.as_deref(), out)
        }
        Command::Bench { models, frame, iterations, out } => {
            commands::bench(&cfg, models, frame.as_deref(), *iterations, out.as_deref().map(Path::new))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
