use std::io::Write;
use std::path::{Path, PathBuf};

use tfl_core::diagnostics::{divergence_probe, write_probe_csv, ProbeRow, RoundMetrics};
use tfl_core::fedcore::{initial_model, run_federated_observed, Strategy};

use crate::artifacts::{self, RunManifest, TARGETS_SCHEMA};
use crate::config::{RunConfig, ShiftKind};
use crate::error::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.bin";
pub const TARGETS_FILE: &str = "targets.tsv";
pub const PROBE_FILE: &str = "probe.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Also write every round's distillation targets.
    pub dump_targets: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Vec<RoundMetrics>,
    pub manifest: RunManifest,
}

impl RunReport {
    /// Accuracy of the model distributed after the last round.
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.acc_refined)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs one federated experiment and writes metrics, final model and manifest
/// (plus the target dump if asked) into `opts.out_dir`.
pub fn cmd_run(config: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    ensure_dir(&opts.out_dir)?;
    let mut manifest = RunManifest::new("run", config);
    let scenario = config.scenario().build()?;
    let exp = &config.experiment;
    let init = initial_model(exp, scenario.train.dim(), scenario.train.num_classes())?;

    let targets_path = opts.out_dir.join(TARGETS_FILE);
    let mut dump = match opts.dump_targets {
        true => {
            let mut w = artifacts::create(&targets_path)?;
            writeln!(w, "{TARGETS_SCHEMA}").map_err(|e| CliError::io(&targets_path, e))?;
            Some(w)
        }
        false => None,
    };
    let mut dump_err = None;
    let out = run_federated_observed(exp, &scenario.shards, &scenario.pool, init, |rec| {
        let m = rec.metrics;
        log::info!(
            "round {:>3}: aggregated {:.4}  refined {:.4}  ensemble {:.4}  loss {:.4}",
            m.round,
            m.acc_aggregated,
            m.acc_refined,
            m.acc_ensemble,
            m.mean_local_loss
        );
        if let (Some(w), Some(t), None) = (dump.as_mut(), rec.targets, dump_err.as_ref()) {
            dump_err = artifacts::write_targets_rows(rec.state.round, t, w).err();
        }
    })?;
    if let Some(e) = dump_err {
        return Err(CliError::io(&targets_path, e));
    }
    if let Some(mut w) = dump {
        w.flush().map_err(|e| CliError::io(&targets_path, e))?;
        manifest.outputs.insert("targets".into(), TARGETS_FILE.into());
    }

    let metrics_path = opts.out_dir.join(METRICS_FILE);
    artifacts::write_with(&metrics_path, |w| artifacts::write_metrics_csv(&out.metrics, w))?;
    artifacts::save_model(&out.final_model, &opts.out_dir.join(MODEL_FILE))?;
    manifest.outputs.insert("metrics".into(), METRICS_FILE.into());
    manifest.outputs.insert("model".into(), MODEL_FILE.into());
    manifest.finished_at = artifacts::unix_now();
    manifest.save(&opts.out_dir.join(MANIFEST_FILE))?;
    Ok(RunReport {
        metrics: out.metrics,
        manifest,
    })
}

/// Re-runs the experiment recorded in a manifest. `threads` replaces the
/// recorded worker count, which never affects results.
pub fn cmd_replay(manifest: &Path, threads: Option<usize>, opts: &RunOptions) -> Result<RunReport> {
    let recorded = RunManifest::load(manifest)?;
    if recorded.command != "run" {
        return Err(CliError::Manifest {
            path: manifest.to_path_buf(),
            message: format!("only `run` manifests can be replayed, this one is `{}`", recorded.command),
        });
    }
    let mut config = recorded.config()?;
    if let Some(t) = threads {
        config.experiment.threads = t;
    }
    cmd_run(&config, opts)
}

/// Runs the one-shot divergence probe and writes its CSV report.
pub fn cmd_probe(config: &RunConfig, out_dir: &Path) -> Result<Vec<ProbeRow>> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let mut manifest = RunManifest::new("probe", config);
    let rows = divergence_probe(&config.probe_config())?;
    artifacts::write_with(&out_dir.join(PROBE_FILE), |w| write_probe_csv(&rows, w))?;
    manifest.outputs.insert("probe".into(), PROBE_FILE.into());
    manifest.finished_at = artifacts::unix_now();
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct CrossDomainReport {
    /// One run per strategy, in the order fedavg, feddf, mrtf.
    pub runs: Vec<(Strategy, RunReport)>,
}

impl CrossDomainReport {
    pub fn final_accuracy(&self, strategy: Strategy) -> Option<f64> {
        self.runs
            .iter()
            .find(|(s, _)| *s == strategy)
            .map(|(_, r)| r.final_accuracy())
    }
}

/// Trains on the unshifted domain and distills/evaluates on the shifted pool
/// with each strategy; every run lands in `<out_dir>/<strategy>/`.
pub fn cmd_crossdomain(config: &RunConfig, opts: &RunOptions) -> Result<CrossDomainReport> {
    if config.data.shift == ShiftKind::None {
        return Err(CliError::config(
            "shift",
            "crossdomain needs a pool shift (identity or standard)",
        ));
    }
    config.validate()?;
    ensure_dir(&opts.out_dir)?;
    let mut manifest = RunManifest::new("crossdomain", config);
    let mut runs = Vec::new();
    for strategy in [Strategy::FedAvg, Strategy::FedDf, Strategy::Mrtf] {
        let mut cfg = config.clone();
        cfg.experiment.strategy = strategy;
        let sub = RunOptions {
            out_dir: opts.out_dir.join(strategy.as_str()),
            dump_targets: opts.dump_targets,
        };
        log::info!("crossdomain: {strategy}");
        let report = cmd_run(&cfg, &sub)?;
        manifest
            .outputs
            .insert(strategy.as_str().into(), Path::new(strategy.as_str()).join(MANIFEST_FILE));
        runs.push((strategy, report));
    }
    let report = CrossDomainReport { runs };
    artifacts::write_with(&opts.out_dir.join(SUMMARY_FILE), |w| {
        writeln!(w, "# tfl crossdomain v1")?;
        writeln!(w, "fedavg,feddf,mrtf")?;
        let acc: Vec<String> = report.runs.iter().map(|(_, r)| r.final_accuracy().to_string()).collect();
        writeln!(w, "{}", acc.join(","))
    })?;
    manifest.outputs.insert("summary".into(), SUMMARY_FILE.into());
    manifest.finished_at = artifacts::unix_now();
    manifest.save(&opts.out_dir.join(MANIFEST_FILE))?;
    Ok(report)
}
