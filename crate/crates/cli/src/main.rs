use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfl_cli::commands::{self, RunOptions};
use tfl_cli::{Result, RunConfig};
use tfl_core::fedcore::Strategy;

#[derive(Parser)]
#[command(name = "tfl", version, about = "Transductive federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Replay the config recorded in a manifest instead of reading --config.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// One-shot divergence probe (centralized vs one decentralized round).
    Probe {
        #[command(flatten)]
        common: Common,
    },
    /// Train on one domain, distill on a shifted pool, with every strategy.
    Crossdomain {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, env = "TFL_OUT_DIR", default_value = "tfl-out")]
    out_dir: PathBuf,
    /// Worker threads for local updates (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Write every round's distillation targets to targets.tsv.
    #[arg(long)]
    dump_targets: bool,
    /// Override any config key, e.g. `--set rounds=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: tfl_core::Error| e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        cfg.apply_overrides(self.overrides.iter().map(String::as_str))?;
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(strategy) = self.strategy {
            cfg.experiment.strategy = strategy;
        }
        if let Some(t) = self.threads {
            cfg.experiment.threads = t;
        }
        Ok(())
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out_dir.clone(),
            dump_targets: self.dump_targets,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, manifest } => {
            let cfg = match &manifest {
                Some(path) => {
                    let mut cfg = tfl_cli::artifacts::RunManifest::load(path)?.config()?;
                    common.apply(&mut cfg)?;
                    cfg
                }
                None => common.resolve()?,
            };
            let report = commands::cmd_run(&cfg, &common.options())?;
            println!(
                "{}: final accuracy {:.4} ({} rounds) -> {}",
                cfg.experiment.strategy,
                report.final_accuracy(),
                report.metrics.len(),
                common.out_dir.display()
            );
        }
        Command::Probe { common } => {
            let rows = commands::cmd_probe(&common.resolve()?, &common.out_dir)?;
            for r in &rows {
                println!(
                    "r0={:<4} {:<8} grad_var {:.4}  weight_div {:.4}  gap {:+.4}",
                    r.pretrain_steps,
                    r.level,
                    r.gradient_variance,
                    r.weight_divergence,
                    r.accuracy_gap()
                );
            }
        }
        Command::Crossdomain { common } => {
            let report = commands::cmd_crossdomain(&common.resolve()?, &common.options())?;
            for (s, r) in &report.runs {
                println!("{s:<7} final accuracy {:.4}", r.final_accuracy());
            }
        }
    }
    Ok(())
}
