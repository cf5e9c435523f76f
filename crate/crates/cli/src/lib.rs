//! Command-line driver for the adapter library: synthetic data generation,
//! training, evaluation, the cross-validated family comparison and the
//! gradient check.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

/// Any `--section.key=value` flag overrides the matching config key.
#[derive(Debug, Parser)]
#[command(name = "cocolora", version, about = "Context-conditioned Bayesian low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; shorthand for `--seed=N` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (`data.jsonl`) and its noise levels (`meta.csv`).
    GenerateData(Common),
    /// Train one family; writes `model.cclr` and `history.csv`.
    Train(Common),
    /// Evaluate a checkpoint; writes `eval.json` and `eval.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated comparison of families over seeds.
    Compare(Common),
    /// Check analytic gradients against finite differences for each family.
    GradCheck(Common),
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut all = Vec::with_capacity(overrides.len() + 1);
    if let Some(seed) = common.seed {
        all.push(("seed".to_string(), seed.to_string()));
    }
    all.extend_from_slice(overrides);
    RunConfig::load(common.config.as_deref(), &all)
}

/// Parses `args` (including the program name) and runs the command,
/// returning a one-line status message.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<String, CliError> {
    let (rest, overrides) = config::split_overrides(args);
    let cli = Cli::try_parse_from(rest)?;
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = resolve(&c, &overrides)?;
            let ds = commands::generate_data_to(&cfg, &c.out)?;
            Ok(format!("wrote {} samples to {}", ds.len(), c.out.display()))
        }
        Command::Train(c) => {
            let cfg = resolve(&c, &overrides)?;
            let (_, history) = commands::train_to(&cfg, &c.out)?;
            let last = history
                .last()
                .map(|e| format!("; final loss {:.4} (nll {:.4}, kl {:.4})", e.loss, e.nll, e.kl))
                .unwrap_or_default();
            Ok(format!(
                "trained {} for {} epochs{last}",
                cfg.model.family,
                history.len()
            ))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common, &overrides)?;
            let path = commands::checkpoint_path(&cfg, checkpoint)?;
            let s = commands::eval_to(&cfg, &path, &common.out)?;
            Ok(s.to_json())
        }
        Command::Compare(c) => {
            let cfg = resolve(&c, &overrides)?;
            Ok(commands::compare_to(&cfg, &c.out)?.to_text())
        }
        Command::GradCheck(c) => {
            let cfg = resolve(&c, &overrides)?;
            let reports = commands::grad_check_to(&cfg, &c.out)?;
            let mut s = String::new();
            for (family, r) in reports {
                s.push_str(&format!(
                    "{family:<7} max relative error {:.3e} over {} coordinates\n",
                    r.max_relative_error, r.checked
                ));
            }
            Ok(s.trim_end().to_string())
        }
    }
}
