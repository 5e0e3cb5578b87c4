//! Command surface of the `toothloc` binary.
//!
//! Every command resolves a [`RunConfig`] (defaults, then `--config`, then
//! flags), writes it to `<out>/config.toml`, and puts all outputs under
//! `--out` with fixed file names. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toothloc::data::DataError;
use toothloc::pipeline::PipelineError;

pub mod commands;
pub mod config;

pub use config::{RunConfig, SNAPSHOT_FILE};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: arguments, configuration, datasets.
    Validation(String),
    /// The command started but could not finish.
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Image { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Config(_) | PipelineError::Mismatch { .. } => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "toothloc", version, about = "Point-wise tooth detection and identification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random source; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: images/, annotations/, manifest.json.
    Synthesize {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the cascade on a dataset's train split.
    Train(TrainArgs),
    /// Score a model or a directory of predictions against a split.
    Eval(EvalArgs),
    /// Detect teeth in PNG images.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// A PNG file or a directory of them.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        /// Multiplies the DR gradient; exercises the failure path.
        #[arg(long, hide = true)]
        fault_dr_scale: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub no_dr: bool,
    #[arg(long)]
    pub no_offset: bool,
    /// Backbone preset: desk, reference or tiny.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory written by `train`.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Directory of `<stem>.json` annotation files to score instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Overrides `eval.split`.
    #[arg(long)]
    pub split: Option<String>,
}

/// Resolve the configuration for `cli` and run its command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.set_seed(seed);
    }
    let out = &cli.global.out;
    match &cli.command {
        Command::Synthesize { count } => {
            if let Some(n) = count {
                cfg.dataset.count = *n;
            }
            commands::synthesize(&cfg, out).map(|_| ())
        }
        Command::Train(a) => {
            if a.no_dr {
                cfg.train.use_dr = false;
            }
            if a.no_offset {
                cfg.train.use_offset = false;
            }
            if let Some(name) = &a.backbone {
                cfg.train.model.backbone = toothloc::pipeline::BackboneConfig::by_name(name)
                    .ok_or_else(|| CliError::Validation(format!("unknown backbone `{name}`")))?;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            commands::train(&cfg, &a.data, out).map(|_| ())
        }
        Command::Eval(a) => {
            if let Some(s) = &a.split {
                cfg.eval.split = s.clone();
            }
            let source = match (&a.model, &a.predictions) {
                (Some(m), _) => commands::EvalSource::Model(m.clone()),
                (None, Some(p)) => commands::EvalSource::Predictions(p.clone()),
                (None, None) => return Err(CliError::Validation("eval needs --model or --predictions".into())),
            };
            commands::eval(&cfg, &a.data, &source, out).map(|_| ())
        }
        Command::Infer { model, input } => commands::infer(&cfg, model, input, out),
        Command::Gradcheck { fault_dr_scale } => {
            if let Some(s) = fault_dr_scale {
                cfg.gradcheck.dr_gradient_scale = *s;
            }
            commands::gradcheck(&cfg, out).map(|_| ())
        }
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
