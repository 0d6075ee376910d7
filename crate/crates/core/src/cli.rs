//! Command-line front end.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "rssgen", version, about = "Synthetic mmWave RSS workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Adaptation scenario, e.g. `val1-bs45`.
    #[arg(long, global = true, default_value = "val1-bs45")]
    pub scenario: String,
    /// Adapt without waiting for the shift detector.
    #[arg(long, global = true)]
    pub force_adapt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate train, VAL-1 and VAL-2 records for every BS.
    Gen,
    /// Train every BS with `train.method` and save snapshots.
    Train,
    /// Training-size sweep over methods, fractions and seeds.
    Sweep,
    /// Collaborative adaptation scenario with its baselines.
    Adapt,
    /// Monte Carlo check of the sample-complexity bound.
    Pac,
    /// Print the resolved config.
    Config,
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and returns a JSON summary for stdout.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    let hash = cfg.hash();
    Ok(match cli.command {
        Command::Gen => {
            let files = experiment::cmd_gen(&cfg, out)?;
            json!({ "command": "gen", "config_hash": hash, "files": files })
        }
        Command::Train => json!({ "command": "train", "summary": experiment::cmd_train(&cfg, out)? }),
        Command::Sweep => json!({ "command": "sweep", "summary": experiment::cmd_sweep(&cfg, out)?.1 }),
        Command::Adapt => {
            let (_, summary) = experiment::cmd_adapt(&cfg, out, &cli.scenario, cli.force_adapt)?;
            for r in &summary.requesters {
                for w in &r.warnings {
                    eprintln!("warning: bs{}: {w}", r.bs_id);
                }
            }
            json!({ "command": "adapt", "summary": summary })
        }
        Command::Pac => {
            let r = experiment::cmd_pac(&cfg, out)?;
            if !r.report.all_pass {
                return Err(Error::Contract("Monte Carlo success rate fell below the bound".into()));
            }
            json!({ "command": "pac", "report": r })
        }
        Command::Config => serde_json::to_value(&cfg)?,
    })
}

/// Machine-readable error report.
pub fn error_json(e: &Error) -> Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["rssgen", "adapt", "--out", "/tmp/x", "--seed", "4", "--scenario", "val2-bs2"]).unwrap();
        assert_eq!(cli.command, Command::Adapt);
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.scenario, "val2-bs2");
        assert_eq!(resolve_config(&cli).unwrap().seed, 4);
    }

    #[test]
    fn missing_dataset_reports_gen_hint() {
        let dir = tempfile::tempdir().unwrap();
        let cli = Cli::try_parse_from(["rssgen", "train", "--out", dir.path().to_str().unwrap()]).unwrap();
        let e = run(&cli).unwrap_err();
        let v = error_json(&e);
        assert_eq!(v["error"]["kind"], "missing_dataset");
        assert!(v["error"]["message"].as_str().unwrap().contains("rssgen gen"));
    }
}
