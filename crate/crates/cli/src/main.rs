//! `certunlearn`: certified unlearning from surrogate data on the command line.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use unlearn_core::error::{Error, ErrorCategory, Result};
use unlearn_core::experiment::{ExperimentConfig, KlChoice};
use unlearn_core::unlearn::{CertBudget, VACUOUS_DELTA};

use commands::Run;
use config::{EvalVerbConfig, GenConfig, KlVerbConfig, SampleConfig, SplitConfig, TrainVerbConfig, UnlearnVerbConfig};

const DEFAULT_OUT: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "certunlearn", version, about = "Certified unlearning without the source data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the verb; see `certunlearn schema <verb>`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// oracle, dv or fixed:<value>.
    #[arg(long, global = true)]
    kl_method: Option<KlChoice>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic source, test and surrogate sets.
    Gen,
    /// Forget, Dirichlet or holdout split of a dataset.
    Split,
    /// Train a model on a dataset.
    Train,
    /// Train from scratch on the retain set.
    Retrain,
    /// Run an unlearning mechanism and release a certified model.
    Unlearn,
    /// Draw SGLD samples from a model's energy.
    Sample,
    /// Estimate the surrogate-to-source KL divergence.
    Kl,
    /// Score models on accuracy, MIA, relearn time and forget score.
    Eval,
    /// Run a full sweep.
    Experiment,
    /// Print the JSON schema of a verb's config.
    Schema { verb: String },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Split => "split",
            Command::Train => "train",
            Command::Retrain => "retrain",
            Command::Unlearn => "unlearn",
            Command::Sample => "sample",
            Command::Kl => "kl",
            Command::Eval => "eval",
            Command::Experiment => "experiment",
            Command::Schema { .. } => "schema",
        }
    }
}

/// A failed invocation: one error, or the failed cells of a sweep.
enum Failure {
    Single(Error),
    Cells {
        category: ErrorCategory,
        message: String,
        cells: serde_json::Value,
    },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Single(e)
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Certification => 2,
        _ => 1,
    }
}

fn report(f: Failure) -> ExitCode {
    let (category, body) = match f {
        Failure::Single(e) => (e.category(), json!({"category": e.category().as_str(), "message": e.to_string()})),
        Failure::Cells {
            category,
            message,
            cells,
        } => (category, json!({"category": category.as_str(), "message": message, "cells": cells})),
    };
    eprintln!("{}", json!({ "error": body }));
    ExitCode::from(exit_code(category))
}

fn warn_if_vacuous(b: &CertBudget) {
    if b.is_vacuous() {
        eprintln!(
            "warning: delta = {} is at or above {VACUOUS_DELTA}; the (epsilon, delta) guarantee is close to vacuous",
            b.delta
        );
    }
}

fn no_kl_flag(cli: &Cli) -> Result<()> {
    match cli.kl_method {
        Some(_) => Err(Error::InvalidArgument(format!(
            "--kl-method does not apply to `{}`",
            cli.command.name()
        ))),
        None => Ok(()),
    }
}

fn finish(run: Run) -> Result<()> {
    let manifest = run.finish()?;
    println!("{}", manifest.display());
    Ok(())
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg_path = cli.config.as_deref();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let seed = cli.seed.unwrap_or(0);
    let verb = cli.command.name();
    let start = |c: serde_json::Value| Run::new(verb, &out, &c, Some(seed));
    match &cli.command {
        Command::Schema { verb } => {
            let s = config::schema_for(verb)
                .ok_or_else(|| Error::InvalidArgument(format!("no config schema for verb {verb:?}")))?;
            println!("{}", serde_json::to_string_pretty(&s).map_err(Error::from)?);
        }
        Command::Gen => {
            no_kl_flag(cli)?;
            let cfg: GenConfig = config::load_or_default(cfg_path)?;
            let mut r = start(snapshot(&cfg)?)?;
            commands::gen(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Split => {
            no_kl_flag(cli)?;
            let cfg: SplitConfig = config::require(cfg_path, verb)?;
            let mut r = start(snapshot(&cfg)?)?;
            commands::split(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Train | Command::Retrain => {
            no_kl_flag(cli)?;
            let cfg: TrainVerbConfig = config::require(cfg_path, verb)?;
            let mut r = start(snapshot(&cfg)?)?;
            let name = if verb == "train" { "model" } else { "retrain" };
            commands::train(&cfg, name, &mut r)?;
            finish(r)?;
        }
        Command::Unlearn => {
            let mut cfg: UnlearnVerbConfig = config::require(cfg_path, verb)?;
            if let Some(k) = cli.kl_method {
                cfg.kl_method = k;
            }
            cfg.budget.validate()?;
            warn_if_vacuous(&cfg.budget);
            let mut r = start(snapshot(&cfg)?)?;
            commands::unlearn(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Sample => {
            no_kl_flag(cli)?;
            let cfg: SampleConfig = config::require(cfg_path, verb)?;
            let mut r = start(snapshot(&cfg)?)?;
            commands::sample(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Kl => {
            let mut cfg: KlVerbConfig = config::require(cfg_path, verb)?;
            if let Some(k) = cli.kl_method {
                cfg.kl_method = k;
            }
            let mut r = start(snapshot(&cfg)?)?;
            commands::kl(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Eval => {
            no_kl_flag(cli)?;
            let cfg: EvalVerbConfig = config::require(cfg_path, verb)?;
            let mut r = start(snapshot(&cfg)?)?;
            commands::eval(&cfg, seed, &mut r)?;
            finish(r)?;
        }
        Command::Experiment => {
            let mut cfg: ExperimentConfig = config::load_or_default(cfg_path)?;
            if let Some(s) = cli.seed {
                cfg.master_seed = s;
            }
            if let Some(k) = cli.kl_method {
                cfg.kl_method = k;
            }
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            cfg.output_dir = Some(dir.clone());
            cfg.validate()?;
            warn_if_vacuous(&cfg.budget);
            let (manifest, failures) = commands::experiment(&cfg, &dir)?;
            println!("{}", manifest.display());
            if !failures.is_empty() {
                let category = if failures.iter().any(|f| f.category == ErrorCategory::Certification.as_str()) {
                    ErrorCategory::Certification
                } else {
                    ErrorCategory::Validation
                };
                return Err(Failure::Cells {
                    category,
                    message: format!("{} sweep cell(s) failed; see {}", failures.len(), display(&manifest)),
                    cells: serde_json::to_value(&failures).map_err(Error::from)?,
                });
            }
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn snapshot<T: serde::Serialize>(cfg: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return report(Failure::Single(Error::InvalidArgument(
                e.render().to_string().trim().to_owned(),
            )))
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}
