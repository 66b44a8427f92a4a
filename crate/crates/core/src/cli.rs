//! Command-line interface.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::engine::graph::Precision;
use crate::run::{run_diagnose, run_finetune, run_pretrain, run_probe, RunArtifacts};
use crate::verify::run_suite;

#[derive(Debug, Parser)]
#[command(name = "specmtm", version, about = "Masked time-series pretraining with a spectral decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; unset keys take the reference defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed for initialization, masking and shuffling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory of the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Model checkpoint (finetune, probe, diagnose).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Clone, Copy, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Masked pre-training; writes model.ckpt and loss.csv.
    Pretrain,
    /// Trains encoder and head from a checkpoint.
    Finetune,
    /// Trains only the head on frozen encoder features.
    Probe,
    /// Writes rank, energy and Bernstein reports under diag/.
    Diagnose,
    /// Runs the property suite; exits nonzero on any failure.
    Verify,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Reads the configuration file (data paths relative to it) and applies
/// the command-line overrides.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut c = RunConfig::load(path)?;
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            c.data = c.data.resolved(&base);
            c
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(p) = cli.precision {
        cfg.train.precision = p.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(a: &RunArtifacts) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(&a.metrics)?);
    println!("wrote {} files to {}", a.files.len(), a.dir.display());
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn execute(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = resolve_config(cli)?;
    cfg.log_overrides();
    let ckpt = cli.checkpoint.as_deref();
    let artifacts = match cli.command {
        Command::Verify => {
            let suite = run_suite(cfg.seed).context("verification suite could not run")?;
            print!("{}", suite.render());
            return Ok(if suite.all_passed() { 0 } else { 1 });
        }
        Command::Pretrain => run_pretrain(&cfg).context("pretrain failed")?,
        Command::Finetune => run_finetune(&cfg, ckpt).context("finetune failed")?,
        Command::Probe => run_probe(&cfg, ckpt).context("probe failed")?,
        Command::Diagnose => run_diagnose(&cfg, ckpt).context("diagnose failed")?,
    };
    report(&artifacts)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 4\nout = \"a\"\n[data]\nformat = \"ts\"\ntrain = \"x_TRAIN.ts\"\ntest = \"x_TEST.ts\"\n").unwrap();
        let cli = Cli::try_parse_from([
            "specmtm",
            "probe",
            "--config",
            p.to_str().unwrap(),
            "--seed",
            "9",
            "--precision",
            "f32",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out, PathBuf::from("a"));
        assert_eq!(cfg.train.precision, Precision::F32);
        match cfg.data {
            crate::data::DataSource::Ts { train, .. } => assert_eq!(train, dir.path().join("x_TRAIN.ts")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_precision_is_rejected() {
        assert!(Cli::try_parse_from(["specmtm", "verify", "--precision", "f16"]).is_err());
    }
}
