//! Command-line front end for the energy-constrained compression workflow.
//!
//! Exit codes: 0 success, 2 infeasible budget, 3 iteration exhaustion,
//! 4 oracle failure, 1 any other error.

use clap::{Args, Parser, Subcommand};
use ecc_core::pipeline::{
    self, PipelineConfig, PipelineError, VerifyOptions,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ecc", version, about = "Energy-constrained channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Re-derive every stage seed from this base.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut config = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.override_seed(seed);
        }
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample sparsity settings and measure their energy with the oracle.
    Profile {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit the bilinear energy model to a collected profile.
    FitEnergy {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compress the dense model to the energy budget.
    Compress {
        #[command(flatten)]
        config: ConfigArgs,
        /// Energy budget in joules (overrides the config).
        #[arg(long)]
        budget: Option<f64>,
        /// Dense checkpoint to start from (pretrained if absent).
        #[arg(long)]
        dense: Option<PathBuf>,
    },
    /// Fine-tune a compressed checkpoint with its zero pattern frozen.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to tune (default: the compress output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report accuracy, predicted and measured energy, and per-layer sparsity.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (default: the fine-tune output, falling
        /// back to the compress output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Audit the fast paths against the slow reference oracles.
    Verify {
        /// Prox instance files (TOML); may repeat.
        #[arg(long)]
        instance: Vec<PathBuf>,
        /// Number of random prox instances to check.
        #[arg(long, default_value_t = 100)]
        random: usize,
        /// Seed for the random instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random bilinear-gradient checks.
        #[arg(long, default_value_t = 100)]
        grad_checks: usize,
        /// Negative-control knob: scales the prox keep threshold (1.0 is
        /// the correct operator; anything else should FAIL).
        #[arg(long, default_value_t = 1.0)]
        threshold_scale: f64,
    },
    /// Measure one exchange payload (read from stdin) with the configured
    /// simulated device; lets the external-command adapter wrap this tool.
    Measure {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run() -> Result<(), PipelineError> {
    match Cli::parse().command {
        Command::Profile { config } => {
            pipeline::cmd_profile(&config.load()?)?;
            Ok(())
        }
        Command::FitEnergy { config } => {
            pipeline::cmd_fit_energy(&config.load()?)?;
            Ok(())
        }
        Command::Compress {
            config,
            budget,
            dense,
        } => {
            pipeline::cmd_compress(&config.load()?, budget, dense.as_deref())?;
            Ok(())
        }
        Command::Finetune { config, checkpoint } => {
            pipeline::cmd_finetune(&config.load()?, checkpoint.as_deref())?;
            Ok(())
        }
        Command::Evaluate { config, checkpoint } => {
            let config = config.load()?;
            let out = &config.output.dir;
            let target = checkpoint.unwrap_or_else(|| {
                let finetuned = pipeline::Artifacts::finetuned(out);
                if finetuned.exists() {
                    finetuned
                } else {
                    pipeline::Artifacts::compressed(out)
                }
            });
            pipeline::cmd_evaluate(&config, &target)?;
            Ok(())
        }
        Command::Verify {
            instance,
            random,
            seed,
            grad_checks,
            threshold_scale,
        } => {
            let report = pipeline::cmd_verify(&VerifyOptions {
                instances: instance,
                random,
                seed,
                grad_checks,
                threshold_scale,
            })?;
            for line in &report.lines {
                println!("{line}");
            }
            println!("{} passed, {} failed", report.passes, report.failures);
            if report.failures > 0 {
                return Err(PipelineError::Artifact(format!(
                    "{} verification checks failed",
                    report.failures
                )));
            }
            Ok(())
        }
        Command::Measure { config } => {
            let joules = pipeline::cmd_measure(&config.load()?, &mut std::io::stdin().lock())?;
            println!("{joules}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
