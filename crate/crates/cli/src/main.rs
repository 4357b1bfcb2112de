//! `odeformer` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad arguments,
//! 3 unreadable input or unwritable output, 4 corrupt or malformed weights
//! container, 5 unsupported image, 6 engine error (missing weights,
//! configuration mismatch, numeric failure).

mod commands;
mod error;
mod image;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odeformer::attention::AttentionActivation;
use odeformer::model::{InferencePath, ModelConfig, QuantMode};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "odeformer",
    version,
    about = "Neural-ODE / MHSA hybrid CNN inference engine"
)]
struct Cli {
    /// Worker threads for layer parallelism; results do not depend on it.
    #[arg(long, global = true, env = "ODEFORMER_THREADS")]
    threads: Option<usize>,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Quant {
    None,
    Llt4,
    Llt8,
}

impl From<Quant> for QuantMode {
    fn from(q: Quant) -> Self {
        match q {
            Quant::None => QuantMode::None,
            Quant::Llt4 => QuantMode::Llt4,
            Quant::Llt8 => QuantMode::Llt8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Path {
    Float,
    Fixed,
}

impl From<Path> for InferencePath {
    fn from(p: Path) -> Self {
        match p {
            Path::Float => InferencePath::Float,
            Path::Fixed => InferencePath::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Activation {
    Relu,
    Softmax,
}

/// Model configuration for commands that do not read a container.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Euler iterations per ODE block.
    #[arg(short = 'c', long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, value_enum, default_value_t = Quant::Llt8)]
    quant: Quant,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Attention activation.
    #[arg(long, value_enum, default_value_t = Activation::Relu)]
    attention: Activation,
}

impl ConfigArgs {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            ode_iterations: self.iterations,
            quant: self.quant.into(),
            heads: self.heads,
            attention: match self.attention {
                Activation::Relu => AttentionActivation::Relu,
                Activation::Softmax => AttentionActivation::Softmax,
            },
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify one 96x96 PNG or PPM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Path::Fixed)]
        path: Path,
        /// Euler iterations; defaults to the value stored with the weights.
        #[arg(short = 'c', long)]
        iterations: Option<usize>,
    },
    /// Compare the float path against a second run on seeded inputs and
    /// check the activation LUTs.
    Verify {
        #[arg(long)]
        weights: PathBuf,
        /// Path compared against the float reference.
        #[arg(long, value_enum, default_value_t = Path::Fixed)]
        against: Path,
        /// Number of seeded random images.
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted max-abs logit deviation.
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
        #[arg(short = 'c', long)]
        iterations: Option<usize>,
    },
    /// Parameter, memory and FLOP accounting for a configuration.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a container of seeded random weights.
    GenWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let format = cli.format;
    match cli.command {
        Command::Infer {
            weights,
            image,
            path,
            iterations,
        } => commands::infer(&weights, &image, path.into(), iterations, format),
        Command::Verify {
            weights,
            against,
            images,
            seed,
            tolerance,
            iterations,
        } => commands::verify(
            &weights,
            &commands::VerifyOptions {
                against: against.into(),
                images,
                seed,
                tolerance,
                iterations,
            },
            format,
        ),
        Command::Report { config } => commands::report(&config.to_config(), format),
        Command::GenWeights { out, seed, config } => {
            commands::gen_weights(&out, seed, &config.to_config(), format)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match threads {
        Some(t) => odeformer::par::with_threads(t, || run(cli)).unwrap_or_else(|e| Err(e.into())),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
