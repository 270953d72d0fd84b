//! Federated round engine: client sampling, local training, DP sanitization,
//! aggregation and strategy dispatch.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{ClientShard, UnlabeledPool};
use crate::diagnostics::{self, RoundMetrics};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, MlpArch, OptimizerState, ParamVector};
use crate::refinery::{self, TeacherTargets};
use crate::rng::{self, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Parameter averaging only.
    FedAvg,
    /// Averaging followed by AvgLogi ensemble distillation on the pool.
    FedDf,
    /// Averaging followed by the refinery pipeline.
    Mrtf,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedDf => "feddf",
            Strategy::Mrtf => "mrtf",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Strategy::FedAvg),
            "feddf" => Ok(Strategy::FedDf),
            "mrtf" => Ok(Strategy::Mrtf),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}` (expected fedavg, feddf or mrtf)"
            ))),
        }
    }
}

/// Update clipping and Gaussian noise applied to each client's delta.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DpConfig {
    pub clip_norm: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Number of clients K.
    pub clients: usize,
    /// Participation ratio R in (0, 1].
    pub participation: f64,
    /// Local epochs E.
    pub local_epochs: usize,
    /// Communication rounds T.
    pub rounds: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub momentum: f64,
    pub strategy: Strategy,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch_size: usize,
    pub temperature: f64,
    pub dp: DpConfig,
    pub use_rectified: bool,
    pub use_cluster_refinery: bool,
    pub cluster_skip_rounds: usize,
    /// Weight the average by client sample counts instead of uniformly.
    pub weight_by_samples: bool,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    /// Worker threads for local updates; 0 uses the rayon default. Results do
    /// not depend on this value.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            participation: 0.1,
            local_epochs: 2,
            rounds: 50,
            batch_size: 64,
            local_lr: 0.05,
            momentum: 0.9,
            strategy: Strategy::Mrtf,
            distill_steps: 500,
            distill_lr: 3e-4,
            distill_batch_size: 64,
            temperature: 4.0,
            dp: DpConfig::default(),
            use_rectified: true,
            use_cluster_refinery: true,
            cluster_skip_rounds: 5,
            weight_by_samples: false,
            hidden_dims: vec![64, 32],
            seed: 0,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// Clients per round, `ceil(R * K)`.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.clients, self.participation)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.local_epochs == 0 || self.rounds == 0 || self.batch_size == 0 {
            return bad("local_epochs, rounds and batch_size must be >= 1".into());
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return bad(format!("local_lr must be >= 0, got {}", self.local_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.distill_lr > 0.0 && self.distill_lr.is_finite()) {
            return bad(format!("distill_lr must be > 0, got {}", self.distill_lr));
        }
        if self.distill_batch_size == 0 {
            return bad("distill_batch_size must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.dp.sigma >= 0.0 && self.dp.sigma.is_finite()) {
            return bad(format!("dp sigma must be >= 0, got {}", self.dp.sigma));
        }
        match self.dp.clip_norm {
            Some(c) if !(c > 0.0 && c.is_finite()) => return bad(format!("dp clip norm must be > 0, got {c}")),
            None if self.dp.sigma > 0.0 => return bad("dp sigma > 0 requires a clip norm".into()),
            _ => {}
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims needs at least one layer, all widths >= 1".into());
        }
        Ok(())
    }
}

fn clients_per_round(clients: usize, participation: f64) -> usize {
    // the epsilon keeps e.g. 0.1 * 100 from rounding up to 11
    ((participation * clients as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Everything the server holds during one round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    /// Model distributed at the start of the round.
    pub global_before: ParamVector,
    /// Participating client ids, ascending.
    pub selected: Vec<usize>,
    /// Uploaded models, in `selected` order.
    pub local_models: Vec<ParamVector>,
    /// Mean local cross-entropy of the last local epoch, in `selected` order.
    pub local_losses: Vec<f64>,
    pub aggregated: ParamVector,
    /// Model distributed in the next round.
    pub refined: ParamVector,
}

/// Uniform sample without replacement of `ceil(R * K)` clients, ascending.
pub fn sample_clients(clients: usize, participation: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    let n = clients_per_round(clients, participation);
    if n == 0 || n > clients {
        return Err(Error::InvalidArgument(format!(
            "ceil(R * K) must lie in [1, K], got {n} for R = {participation}, K = {clients}"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SAMPLE_CLIENTS, round as u64]);
    let mut picked = index::sample(&mut rng, clients, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Random stream of one client's local training in one round.
pub fn client_stream(seed: u64, round: usize, client_id: usize) -> StreamRng {
    rng::stream(seed, &[tag::LOCAL_SHUFFLE, round as u64, client_id as u64])
}

/// `E` epochs of shuffled minibatch SGD with momentum from `global`, using
/// the given random stream. Returns the local model and the mean training
/// loss over the last epoch.
pub fn local_update_with_rng(
    global: &ParamVector,
    shard: &ClientShard,
    config: &ExperimentConfig,
    round: usize,
    rng: &mut StreamRng,
) -> Result<(ParamVector, f64)> {
    let data = &shard.dataset;
    if data.is_empty() {
        return Err(Error::EmptyBatch("local_update"));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = global.clone();
    let mut state = OptimizerState::sgd(theta.len());
    let mut epoch_loss = 0.0;
    let diverged = || Error::Diverged {
        client: shard.client_id,
        round,
    };
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = data.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grad) = nn::cross_entropy_loss_grad(&theta, &x, &y)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(diverged());
            }
            epoch_loss += loss * batch.len() as f64;
            (theta, state) = nn::sgd_momentum_step(theta, &grad, state, config.local_lr, config.momentum)?;
        }
        if !theta.is_finite() {
            return Err(diverged());
        }
    }
    Ok((theta, epoch_loss / n as f64))
}

/// Local training of `shard` in `round`, on the client's own random stream.
pub fn local_update(
    global: &ParamVector,
    shard: &ClientShard,
    config: &ExperimentConfig,
    round: usize,
) -> Result<(ParamVector, f64)> {
    let mut rng = client_stream(config.seed, round, shard.client_id);
    local_update_with_rng(global, shard, config, round, &mut rng)
}

/// Clips `delta` to L2 norm `clip_norm`, then adds `N(0, sigma^2)` noise to
/// every coordinate.
pub fn dp_sanitize<R: Rng + ?Sized>(delta: &ParamVector, clip_norm: f64, sigma: f64, rng: &mut R) -> Result<ParamVector> {
    if !(clip_norm > 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need clip_norm > 0 and sigma >= 0, got {clip_norm} and {sigma}"
        )));
    }
    let norm = delta.norm();
    let clipped = if norm > clip_norm {
        delta.scale(clip_norm / norm)
    } else {
        delta.clone()
    };
    if sigma == 0.0 {
        return Ok(clipped);
    }
    let noisy = clipped
        .values()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(clipped.with_values(noisy))
}

/// Elementwise weighted mean of models sharing one architecture.
pub fn aggregate_average(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if weights.len() != models.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation weights",
            expected: models.len(),
            actual: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightSum { sum });
    }
    if let Some(m) = models.iter().find(|m| !m.same_arch(first)) {
        return Err(Error::DimensionMismatch {
            context: "aggregated architectures",
            expected: first.len(),
            actual: m.len(),
        });
    }
    // Accumulate in a fixed order (sorted by values) so the result does not
    // depend on the order the pairs were supplied in.
    let mut pairs: Vec<(&ParamVector, f64)> = models.iter().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            a.0.values()
                .iter()
                .zip(b.0.values())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut out = vec![0.0; first.len()];
    for (m, w) in pairs {
        for (o, v) in out.iter_mut().zip(m.values()) {
            *o += w * v;
        }
    }
    Ok(first.with_values(out))
}

/// Per-round artifacts handed to a [`run_federated_observed`] observer.
pub struct RoundRecord<'a> {
    pub state: &'a RoundState,
    /// Distillation targets, for strategies that build them.
    pub targets: Option<&'a TeacherTargets>,
    pub metrics: &'a RoundMetrics,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    /// Refined model of the last round.
    pub final_model: ParamVector,
    /// Aggregated (pre-refinement) model of the last round.
    pub final_aggregated: ParamVector,
}

/// Architecture implied by the config and data.
pub fn model_arch(config: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<Arc<MlpArch>> {
    Ok(Arc::new(MlpArch::new(input_dim, config.hidden_dims.clone(), classes)?))
}

/// Seeded initial global model.
pub fn initial_model(config: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<ParamVector> {
    let arch = model_arch(config, input_dim, classes)?;
    Ok(ParamVector::init(arch, &mut rng::stream(config.seed, &[tag::INIT])))
}

/// Runs `config.rounds` rounds from a seeded initial model.
pub fn run_federated(config: &ExperimentConfig, shards: &[ClientShard], pool: &UnlabeledPool) -> Result<RunOutput> {
    let first = shards
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client shards".into()))?;
    let init = initial_model(config, first.dataset.dim(), first.dataset.num_classes())?;
    run_federated_observed(config, shards, pool, init, |_| {})
}

/// Runs the federation from `init`, calling `observer` after every round.
pub fn run_federated_observed(
    config: &ExperimentConfig,
    shards: &[ClientShard],
    pool: &UnlabeledPool,
    init: ParamVector,
    mut observer: impl FnMut(RoundRecord<'_>),
) -> Result<RunOutput> {
    config.validate()?;
    if shards.len() != config.clients {
        return Err(Error::DimensionMismatch {
            context: "client shards",
            expected: config.clients,
            actual: shards.len(),
        });
    }
    if let Some(s) = shards.iter().find(|s| s.dataset.dim() != init.arch().input_dim()) {
        return Err(Error::DimensionMismatch {
            context: "shard feature width",
            expected: init.arch().input_dim(),
            actual: s.dataset.dim(),
        });
    }
    if pool.features().cols() != init.arch().input_dim() {
        return Err(Error::DimensionMismatch {
            context: "pool feature width",
            expected: init.arch().input_dim(),
            actual: pool.features().cols(),
        });
    }
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut global = init;
    let mut metrics = Vec::with_capacity(config.rounds);
    let mut last_aggregated = global.clone();
    for round in 0..config.rounds {
        let started = Instant::now();
        let selected = sample_clients(config.clients, config.participation, round, config.seed)?;
        let updates: Vec<(ParamVector, f64)> = workers.install(|| {
            selected
                .par_iter()
                .map(|&k| client_round(&global, &shards[k], config, round))
                .collect::<Result<Vec<_>>>()
        })?;
        let (local_models, local_losses): (Vec<_>, Vec<_>) = updates.into_iter().unzip();

        let weights = if config.weight_by_samples {
            let total: usize = selected.iter().map(|&k| shards[k].n_k()).sum();
            selected
                .iter()
                .map(|&k| shards[k].n_k() as f64 / total as f64)
                .collect()
        } else {
            vec![1.0 / selected.len() as f64; selected.len()]
        };
        let aggregated = aggregate_average(&local_models, &weights)?;

        let mut state = RoundState {
            round,
            global_before: global,
            selected,
            local_models,
            local_losses,
            refined: aggregated.clone(),
            aggregated,
        };
        let pool_x = pool.features();
        let (targets, used_ut) = match config.strategy {
            Strategy::FedAvg => (None, None),
            Strategy::FedDf => {
                let out = refinery::feddf_round_refine(&state, pool_x, config)?;
                state.refined = out.params;
                (Some(out.targets), None)
            }
            Strategy::Mrtf => {
                let out = refinery::mrtf_round_refine(&state, pool_x, config)?;
                state.refined = out.params;
                (Some(out.targets), out.u_t)
            }
        };

        let round_metrics = round_metrics(&state, targets.as_ref(), used_ut, pool, started)?;
        observer(RoundRecord {
            state: &state,
            targets: targets.as_ref(),
            metrics: &round_metrics,
        });
        metrics.push(round_metrics);
        last_aggregated = state.aggregated;
        global = state.refined;
    }
    Ok(RunOutput {
        metrics,
        final_model: global,
        final_aggregated: last_aggregated,
    })
}

/// Local update plus optional DP sanitization of the uploaded delta.
fn client_round(
    global: &ParamVector,
    shard: &ClientShard,
    config: &ExperimentConfig,
    round: usize,
) -> Result<(ParamVector, f64)> {
    let (local, loss) = local_update(global, shard, config, round)?;
    let Some(clip) = config.dp.clip_norm else {
        return Ok((local, loss));
    };
    let mut rng = rng::stream(config.seed, &[tag::DP_NOISE, round as u64, shard.client_id as u64]);
    let delta = dp_sanitize(&local.sub(global), clip, config.dp.sigma, &mut rng)?;
    Ok((global.add(&delta), loss))
}

fn round_metrics(
    state: &RoundState,
    targets: Option<&TeacherTargets>,
    used_ut: Option<f64>,
    pool: &UnlabeledPool,
    started: Instant,
) -> Result<RoundMetrics> {
    let x = pool.features();
    let acc_aggregated = diagnostics::pool_accuracy(&state.aggregated, pool)?;
    let acc_refined = diagnostics::pool_accuracy(&state.refined, pool)?;
    let acc_ensemble = match targets {
        Some(t) => diagnostics::targets_accuracy(t, pool)?,
        None => {
            // FedAvg builds no targets; report the AvgLogi ensemble of its locals
            let logits = state
                .local_models
                .iter()
                .map(|p| nn::forward_logits(p, x))
                .collect::<Result<Vec<Matrix>>>()?;
            let refs: Vec<&Matrix> = logits.iter().collect();
            let w = vec![1.0 / refs.len() as f64; refs.len()];
            diagnostics::targets_accuracy(&refinery::avg_logi(&refs, &w)?, pool)?
        }
    };
    let classes = pool.num_classes();
    let u_t = match used_ut {
        Some(u) => u,
        None => refinery::compute_ut(&state.local_losses, classes)?,
    };
    Ok(RoundMetrics {
        round: state.round,
        acc_aggregated,
        acc_refined,
        acc_ensemble,
        mean_local_loss: state.local_losses.iter().sum::<f64>() / state.local_losses.len() as f64,
        u_t,
        gradient_variance: diagnostics::gradient_variance(&state.local_models, &state.aggregated)?,
        wallclock_secs: started.elapsed().as_secs_f64(),
    })
}
