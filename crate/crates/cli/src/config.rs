//! Flat `key = value` experiment configuration.
//!
//! Every key has a default, so an empty file is a valid config. `entries`
//! lists every key with its resolved value in a form `set` parses back
//! exactly (floats use the shortest round-trip representation), which is what
//! makes manifests replayable.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tfl_core::data::{BlobSpec, DomainShift, PartitionStrategy};
use tfl_core::diagnostics::{ProbeConfig, ProbeLevel};
use tfl_core::fedcore::{ExperimentConfig, Strategy};
use tfl_core::scenario::{DataSource, ScenarioSpec};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Label,
    Dirichlet,
    Iid,
}

/// Domain shift of the pool relative to the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// No shift requested (plain run).
    None,
    /// Explicitly unshifted; accepted by `crossdomain` as a control.
    Identity,
    /// Rotation + mean offset + noise rescaling, see the `shift_*` keys.
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: SourceKind,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub split: SplitKind,
    pub alpha: f64,
    pub classes_per_client: usize,
    pub shift: ShiftKind,
    pub shift_rotate: bool,
    pub shift_mean_offset: f64,
    pub shift_noise_scale: f64,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    pub idx_max_train: Option<usize>,
    pub idx_max_test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub hidden_dims: Vec<usize>,
    pub pretrain_steps: Vec<usize>,
    pub steps: usize,
    pub clients: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Dirichlet concentrations compared by the probe, most homogeneous first.
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
    pub probe: ProbeSettings,
}

/// The desk-scale reference setting: 10-class blobs split over 20 clients
/// with Dir(0.1), a quarter of them per round, 30 rounds.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig {
                clients: 20,
                participation: 0.25,
                local_epochs: 3,
                rounds: 30,
                batch_size: 64,
                local_lr: 0.01,
                hidden_dims: vec![512],
                ..ExperimentConfig::default()
            },
            data: DataConfig {
                source: SourceKind::Blobs,
                classes: 10,
                dim: 20,
                separation: 4.0,
                train_per_class: 200,
                test_per_class: 100,
                split: SplitKind::Dirichlet,
                alpha: 0.1,
                classes_per_client: 2,
                shift: ShiftKind::None,
                shift_rotate: true,
                shift_mean_offset: 1.0,
                shift_noise_scale: 1.5,
                idx_train_images: None,
                idx_train_labels: None,
                idx_test_images: None,
                idx_test_labels: None,
                idx_max_train: None,
                idx_max_test: None,
            },
            probe: ProbeSettings {
                hidden_dims: vec![64, 32],
                pretrain_steps: vec![0, 20, 100, 400],
                steps: 50,
                clients: 10,
                lr: 0.05,
                batch_size: 64,
                alphas: vec![10.0, 1.0, 0.1],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::config(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim(), what)).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value, what).map(Some)
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |x| x.to_string())
}

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let e = &mut self.experiment;
        let d = &mut self.data;
        let p = &mut self.probe;
        const UINT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "clients" => e.clients = parse(key, value, UINT)?,
            "participation" => e.participation = parse(key, value, REAL)?,
            "local_epochs" => e.local_epochs = parse(key, value, UINT)?,
            "rounds" => e.rounds = parse(key, value, UINT)?,
            "batch_size" => e.batch_size = parse(key, value, UINT)?,
            "local_lr" => e.local_lr = parse(key, value, REAL)?,
            "momentum" => e.momentum = parse(key, value, REAL)?,
            "strategy" => {
                e.strategy = value
                    .parse::<Strategy>()
                    .map_err(|_| CliError::config(key, format!("expected fedavg, feddf or mrtf, got `{value}`")))?
            }
            "distill_steps" => e.distill_steps = parse(key, value, UINT)?,
            "distill_lr" => e.distill_lr = parse(key, value, REAL)?,
            "distill_batch_size" => e.distill_batch_size = parse(key, value, UINT)?,
            "temperature" => e.temperature = parse(key, value, REAL)?,
            "dp_clip_norm" => e.dp.clip_norm = parse_opt(key, value, "a real number or none")?,
            "dp_sigma" => e.dp.sigma = parse(key, value, REAL)?,
            "use_rectified" => e.use_rectified = parse_bool(key, value)?,
            "use_cluster_refinery" => e.use_cluster_refinery = parse_bool(key, value)?,
            "cluster_skip_rounds" => e.cluster_skip_rounds = parse(key, value, UINT)?,
            "weight_by_samples" => e.weight_by_samples = parse_bool(key, value)?,
            "hidden_dims" => e.hidden_dims = parse_list(key, value, "comma-separated integers")?,
            "seed" => e.seed = parse(key, value, UINT)?,
            "threads" => e.threads = parse(key, value, UINT)?,

            "data_source" => {
                d.source = match value {
                    "blobs" => SourceKind::Blobs,
                    "idx" => SourceKind::Idx,
                    _ => return Err(CliError::config(key, format!("expected blobs or idx, got `{value}`"))),
                }
            }
            "classes" => d.classes = parse(key, value, UINT)?,
            "dim" => d.dim = parse(key, value, UINT)?,
            "separation" => d.separation = parse(key, value, REAL)?,
            "train_per_class" => d.train_per_class = parse(key, value, UINT)?,
            "test_per_class" => d.test_per_class = parse(key, value, UINT)?,
            "split" => {
                d.split = match value {
                    "label" => SplitKind::Label,
                    "dirichlet" => SplitKind::Dirichlet,
                    "iid" => SplitKind::Iid,
                    _ => {
                        return Err(CliError::config(
                            key,
                            format!("expected label, dirichlet or iid, got `{value}`"),
                        ))
                    }
                }
            }
            "alpha" => d.alpha = parse(key, value, REAL)?,
            "classes_per_client" => d.classes_per_client = parse(key, value, UINT)?,
            "shift" => {
                d.shift = match value {
                    "none" => ShiftKind::None,
                    "identity" => ShiftKind::Identity,
                    "standard" => ShiftKind::Standard,
                    _ => {
                        return Err(CliError::config(
                            key,
                            format!("expected none, identity or standard, got `{value}`"),
                        ))
                    }
                }
            }
            "shift_rotate" => d.shift_rotate = parse_bool(key, value)?,
            "shift_mean_offset" => d.shift_mean_offset = parse(key, value, REAL)?,
            "shift_noise_scale" => d.shift_noise_scale = parse(key, value, REAL)?,
            "idx_train_images" => d.idx_train_images = parse_opt(key, value, "a path")?,
            "idx_train_labels" => d.idx_train_labels = parse_opt(key, value, "a path")?,
            "idx_test_images" => d.idx_test_images = parse_opt(key, value, "a path")?,
            "idx_test_labels" => d.idx_test_labels = parse_opt(key, value, "a path")?,
            "idx_max_train" => d.idx_max_train = parse_opt(key, value, "an integer or none")?,
            "idx_max_test" => d.idx_max_test = parse_opt(key, value, "an integer or none")?,

            "probe_hidden_dims" => p.hidden_dims = parse_list(key, value, "comma-separated integers")?,
            "probe_pretrain_steps" => p.pretrain_steps = parse_list(key, value, "comma-separated integers")?,
            "probe_steps" => p.steps = parse(key, value, UINT)?,
            "probe_clients" => p.clients = parse(key, value, UINT)?,
            "probe_lr" => p.lr = parse(key, value, REAL)?,
            "probe_batch_size" => p.batch_size = parse(key, value, UINT)?,
            "probe_alphas" => p.alphas = parse_list(key, value, "comma-separated reals")?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.experiment;
        let d = &self.data;
        let p = &self.probe;
        vec![
            ("clients", e.clients.to_string()),
            ("participation", e.participation.to_string()),
            ("local_epochs", e.local_epochs.to_string()),
            ("rounds", e.rounds.to_string()),
            ("batch_size", e.batch_size.to_string()),
            ("local_lr", e.local_lr.to_string()),
            ("momentum", e.momentum.to_string()),
            ("strategy", e.strategy.to_string()),
            ("distill_steps", e.distill_steps.to_string()),
            ("distill_lr", e.distill_lr.to_string()),
            ("distill_batch_size", e.distill_batch_size.to_string()),
            ("temperature", e.temperature.to_string()),
            ("dp_clip_norm", opt(&e.dp.clip_norm)),
            ("dp_sigma", e.dp.sigma.to_string()),
            ("use_rectified", e.use_rectified.to_string()),
            ("use_cluster_refinery", e.use_cluster_refinery.to_string()),
            ("cluster_skip_rounds", e.cluster_skip_rounds.to_string()),
            ("weight_by_samples", e.weight_by_samples.to_string()),
            ("hidden_dims", join(&e.hidden_dims)),
            ("seed", e.seed.to_string()),
            ("threads", e.threads.to_string()),
            (
                "data_source",
                match d.source {
                    SourceKind::Blobs => "blobs",
                    SourceKind::Idx => "idx",
                }
                .into(),
            ),
            ("classes", d.classes.to_string()),
            ("dim", d.dim.to_string()),
            ("separation", d.separation.to_string()),
            ("train_per_class", d.train_per_class.to_string()),
            ("test_per_class", d.test_per_class.to_string()),
            (
                "split",
                match d.split {
                    SplitKind::Label => "label",
                    SplitKind::Dirichlet => "dirichlet",
                    SplitKind::Iid => "iid",
                }
                .into(),
            ),
            ("alpha", d.alpha.to_string()),
            ("classes_per_client", d.classes_per_client.to_string()),
            (
                "shift",
                match d.shift {
                    ShiftKind::None => "none",
                    ShiftKind::Identity => "identity",
                    ShiftKind::Standard => "standard",
                }
                .into(),
            ),
            ("shift_rotate", d.shift_rotate.to_string()),
            ("shift_mean_offset", d.shift_mean_offset.to_string()),
            ("shift_noise_scale", d.shift_noise_scale.to_string()),
            ("idx_train_images", opt_path(&d.idx_train_images)),
            ("idx_train_labels", opt_path(&d.idx_train_labels)),
            ("idx_test_images", opt_path(&d.idx_test_images)),
            ("idx_test_labels", opt_path(&d.idx_test_labels)),
            ("idx_max_train", opt(&d.idx_max_train)),
            ("idx_max_test", opt(&d.idx_max_test)),
            ("probe_hidden_dims", join(&p.hidden_dims)),
            ("probe_pretrain_steps", join(&p.pretrain_steps)),
            ("probe_steps", p.steps.to_string()),
            ("probe_clients", p.clients.to_string()),
            ("probe_lr", p.lr.to_string()),
            ("probe_batch_size", p.batch_size.to_string()),
            ("probe_alphas", join(&p.alphas)),
        ]
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; a key may appear only once.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                path: origin.to_path_buf(),
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Applies `key=value` overrides (command-line `--set`).
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::config(o, "override must look like key=value"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let d = &self.data;
        let p = &self.probe;
        let fail = |key: &str, msg: String| Err(CliError::config(key, msg));
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                fail(key, format!("must be > 0, got {v}"))
            }
        };
        for (key, v) in [
            ("clients", e.clients),
            ("local_epochs", e.local_epochs),
            ("rounds", e.rounds),
            ("batch_size", e.batch_size),
            ("distill_batch_size", e.distill_batch_size),
            ("train_per_class", d.train_per_class),
            ("test_per_class", d.test_per_class),
            ("probe_clients", p.clients),
            ("probe_batch_size", p.batch_size),
        ] {
            if v == 0 {
                return fail(key, "must be >= 1".into());
            }
        }
        if !(e.participation > 0.0 && e.participation <= 1.0) {
            return fail(
                "participation",
                format!("must lie in (0, 1] so that at least one client takes part, got {}", e.participation),
            );
        }
        if !(e.local_lr >= 0.0 && e.local_lr.is_finite()) {
            return fail("local_lr", format!("must be >= 0, got {}", e.local_lr));
        }
        if !(0.0..1.0).contains(&e.momentum) {
            return fail("momentum", format!("must lie in [0, 1), got {}", e.momentum));
        }
        positive("distill_lr", e.distill_lr)?;
        positive("temperature", e.temperature)?;
        if let Some(c) = e.dp.clip_norm {
            positive("dp_clip_norm", c)?;
        }
        if !(e.dp.sigma >= 0.0 && e.dp.sigma.is_finite()) {
            return fail("dp_sigma", format!("must be >= 0, got {}", e.dp.sigma));
        }
        if e.dp.sigma > 0.0 && e.dp.clip_norm.is_none() {
            return fail("dp_sigma", "noise requires dp_clip_norm to be set".into());
        }
        if e.hidden_dims.is_empty() || e.hidden_dims.contains(&0) {
            return fail("hidden_dims", "needs at least one layer, all widths >= 1".into());
        }
        if d.classes < 2 {
            return fail("classes", format!("must be >= 2, got {}", d.classes));
        }
        if d.dim < 2 {
            return fail("dim", format!("must be >= 2, got {}", d.dim));
        }
        positive("separation", d.separation)?;
        match d.split {
            SplitKind::Dirichlet => positive("alpha", d.alpha)?,
            SplitKind::Label if d.classes_per_client == 0 => {
                return fail("classes_per_client", "must be >= 1".into());
            }
            _ => {}
        }
        if d.shift_mean_offset < 0.0 || !d.shift_mean_offset.is_finite() {
            return fail("shift_mean_offset", format!("must be >= 0, got {}", d.shift_mean_offset));
        }
        positive("shift_noise_scale", d.shift_noise_scale)?;
        if d.source == SourceKind::Idx {
            for (key, v) in [
                ("idx_train_images", &d.idx_train_images),
                ("idx_train_labels", &d.idx_train_labels),
                ("idx_test_images", &d.idx_test_images),
                ("idx_test_labels", &d.idx_test_labels),
            ] {
                if v.is_none() {
                    return fail(key, "required when data_source = idx".into());
                }
            }
        }
        if p.hidden_dims.is_empty() || p.hidden_dims.contains(&0) {
            return fail("probe_hidden_dims", "needs at least one layer, all widths >= 1".into());
        }
        if p.pretrain_steps.is_empty() {
            return fail("probe_pretrain_steps", "needs at least one value".into());
        }
        positive("probe_lr", p.lr)?;
        if p.alphas.is_empty() {
            return fail("probe_alphas", "needs at least one value".into());
        }
        for &a in &p.alphas {
            positive("probe_alphas", a)?;
        }
        e.validate()?;
        Ok(())
    }

    pub fn partition(&self) -> PartitionStrategy {
        match self.data.split {
            SplitKind::Label => PartitionStrategy::ByLabel {
                classes_per_client: self.data.classes_per_client,
            },
            SplitKind::Dirichlet => PartitionStrategy::ByDirichlet { alpha: self.data.alpha },
            SplitKind::Iid => PartitionStrategy::Iid,
        }
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.data.classes,
            dim: self.data.dim,
            separation: self.data.separation,
            seed: self.experiment.seed,
        }
    }

    /// Shift applied to the pool; the rotation follows the run seed.
    pub fn pool_shift(&self) -> DomainShift {
        let d = &self.data;
        match d.shift {
            ShiftKind::None | ShiftKind::Identity => DomainShift::identity(),
            ShiftKind::Standard => DomainShift {
                rotation_seed: d.shift_rotate.then_some(self.experiment.seed),
                mean_offset: d.shift_mean_offset,
                noise_scale: d.shift_noise_scale,
            },
        }
    }

    pub fn scenario(&self) -> ScenarioSpec {
        let d = &self.data;
        let source = match d.source {
            SourceKind::Blobs => DataSource::Blobs {
                spec: self.blob_spec(),
                train_per_class: d.train_per_class,
                test_per_class: d.test_per_class,
                train_shift: DomainShift::identity(),
                pool_shift: self.pool_shift(),
            },
            SourceKind::Idx => DataSource::Idx {
                train_images: d.idx_train_images.clone().unwrap_or_default(),
                train_labels: d.idx_train_labels.clone().unwrap_or_default(),
                test_images: d.idx_test_images.clone().unwrap_or_default(),
                test_labels: d.idx_test_labels.clone().unwrap_or_default(),
                max_train: d.idx_max_train,
                max_test: d.idx_max_test,
            },
        };
        ScenarioSpec {
            source,
            partition: self.partition(),
            clients: self.experiment.clients,
            seed: self.experiment.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            blobs: self.blob_spec(),
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            hidden_dims: p.hidden_dims.clone(),
            clients: p.clients,
            steps: p.steps,
            pretrain_steps: p.pretrain_steps.clone(),
            levels: p
                .alphas
                .iter()
                .map(|&alpha| ProbeLevel {
                    name: format!("dir{alpha}"),
                    strategy: PartitionStrategy::ByDirichlet { alpha },
                })
                .collect(),
            batch_size: p.batch_size,
            lr: p.lr,
            momentum: self.experiment.momentum,
            seed: self.experiment.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_parse_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("local_lr", "0.1").unwrap();
        cfg.set("dp_clip_norm", "1").unwrap();
        cfg.set("hidden_dims", "8,4").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_entry_is_a_settable_key() {
        let cfg = RunConfig::default();
        let mut copy = cfg.clone();
        for (k, v) in cfg.entries() {
            copy.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
