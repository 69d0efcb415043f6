//! `padro` command-line runner.
//!
//! Settings resolve as flags over the `--config` file over built-in defaults.
//! Exit status is 0 on success, 1 when a solver or validation suite fails, and
//! 2 on configuration or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use padro::experiments::{load_config, run, Experiment, ExperimentConfig, Fault};
use padro::Error;

#[derive(Parser)]
#[command(
    name = "padro",
    version,
    about = "Perturbation-aware robust reconstruction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert H = 2·I with an isotropic Gaussian perturbation.
    InvertIso(Shared),
    /// Invert H = [[5, 1], [1, 2]] with a full-covariance perturbation.
    InvertAniso(Shared),
    /// MNIST deconvolution against a tuned Tikhonov baseline.
    Deconv(Shared),
    /// Run the gradient, duality, transport, multilevel and entropy checks.
    Validate {
        #[command(flatten)]
        shared: Shared,
        /// Corrupt a component on purpose to confirm the suites catch it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    EntropyGradientSign,
}

#[derive(Args)]
struct Shared {
    /// JSON file with any subset of the configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Radius of the transport ball.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Entropic regularization weight.
    #[arg(long)]
    delta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    mnist: Option<PathBuf>,
    /// Evaluate deconvolution on every available test image.
    #[arg(long)]
    full: bool,
}

impl Shared {
    fn resolve(&self, experiment: Experiment) -> padro::Result<ExperimentConfig> {
        let mut cfg = load_config(experiment, self.config.as_deref())?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.mnist {
            cfg.mnist_dir = Some(v.clone());
        }
        if self.full {
            cfg.full = true;
        }
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NotConverged { .. } | Error::Singular(_) | Error::ValidationFailed(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolved = match &cli.command {
        Command::InvertIso(s) => s.resolve(Experiment::InvertIso),
        Command::InvertAniso(s) => s.resolve(Experiment::InvertAniso),
        Command::Deconv(s) => s.resolve(Experiment::Deconv),
        Command::Validate { shared, inject_fault } => shared.resolve(Experiment::Validate).map(|mut cfg| {
            if let Some(FaultArg::EntropyGradientSign) = inject_fault {
                cfg.validation.inject_fault = Some(Fault::EntropyGradientSign);
            }
            cfg
        }),
    };
    let outcome = resolved.and_then(|cfg| run(&cfg));
    match outcome {
        Ok(out) => {
            println!("wrote {} files to {}", out.files.len(), out.dir.display());
            println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("padro: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
