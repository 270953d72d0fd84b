//! On-disk outputs: metrics CSV, model files, target dumps and run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tfl_core::diagnostics::RoundMetrics;
use tfl_core::nn::{MlpArch, ParamVector};
use tfl_core::refinery::TeacherTargets;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// First line of every metrics file; bump the version when columns change.
pub const METRICS_SCHEMA: &str = "# tfl metrics v1";
pub const METRICS_COLUMNS: &str = "round,acc_aggregated,acc_refined,acc_ensemble,mean_local_loss,u_t,gradient_variance";
pub const TARGETS_SCHEMA: &str = "# tfl targets v1";

/// Wall-clock time is deliberately left out so reruns are byte-identical.
pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_SCHEMA}")?;
    writeln!(out, "{METRICS_COLUMNS}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.round, m.acc_aggregated, m.acc_refined, m.acc_ensemble, m.mean_local_loss, m.u_t, m.gradient_variance
        )?;
    }
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Appends one round of targets: `round<TAB>sample<TAB>provenance<TAB>p_0 … p_{C-1}`.
pub fn write_targets_rows<W: Write>(round: usize, targets: &TeacherTargets, out: &mut W) -> std::io::Result<()> {
    let probs = targets.probs();
    for i in 0..probs.rows() {
        write!(out, "{round}\t{i}\t{}", targets.provenance().as_str())?;
        for p in probs.row(i) {
            write!(out, "\t{p}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

const MODEL_MAGIC: &[u8; 8] = b"TFLMODL1";

/// Model file: magic, architecture (little-endian u32 input width, hidden
/// layer count, each hidden width, class count), u64 parameter count, then
/// the parameters as little-endian f64.
pub fn write_model<W: Write>(params: &ParamVector, mut out: W) -> std::io::Result<()> {
    let arch = params.arch();
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&(arch.input_dim() as u32).to_le_bytes())?;
    out.write_all(&(arch.hidden_dims().len() as u32).to_le_bytes())?;
    for &h in arch.hidden_dims() {
        out.write_all(&(h as u32).to_le_bytes())?;
    }
    out.write_all(&(arch.num_classes() as u32).to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_model(params: &ParamVector, path: &Path) -> Result<()> {
    write_with(path, |w| write_model(params, w))
}

pub fn load_model(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    let bad = |message: String| CliError::ModelFormat {
        path: path.to_path_buf(),
        message,
    };
    let mut rest = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad("truncated".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(8)? != MODEL_MAGIC {
        return Err(bad("magic mismatch".into()));
    }
    let mut u32_le = || -> Result<usize> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize) };
    let input = u32_le()?;
    let layers = u32_le()?;
    let hidden = (0..layers).map(|_| u32_le()).collect::<Result<Vec<_>>>()?;
    let classes = u32_le()?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let arch = Arc::new(MlpArch::new(input, hidden, classes)?);
    if count != arch.param_count() {
        return Err(bad(format!(
            "header says {count} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let raw = take(count * 8)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !rest.is_empty() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(ParamVector::from_values(arch, values)?)
}

pub const MANIFEST_FORMAT: &str = "tfl-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    /// Every config key with its resolved value.
    pub config: BTreeMap<String, String>,
    /// Output files, relative to the manifest's directory.
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.experiment.seed,
            started_at: unix_now(),
            finished_at: 0,
            config: config
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            outputs: BTreeMap::new(),
        }
    }

    /// Rebuilds the config the manifest was written from.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Manifest {
                path: path.to_path_buf(),
                message: format!("unsupported format `{}`", m.format),
            });
        }
        Ok(m)
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
