//! Server-side model refinery on the unlabeled pool.
//!
//! The pipeline turns the models of one round into distillation targets and
//! then distills the aggregated model towards them:
//!
//! 1. every teacher's logits are standardized by their pool-wide standard
//!    deviation and multiplied by a temperature ([`normalize_logits`]), which
//!    makes the targets independent of each teacher's logit magnitude;
//! 2. local teachers are mixed per sample with weights that favour confident
//!    (low-entropy) teachers, and blended with the previous and current global
//!    models under the loss-driven schedule `u_t` ([`rectified_targets`]);
//! 3. soft class centroids in the aggregated model's feature space replace the
//!    targets by a cosine-distance softmax ([`build_centroids`],
//!    [`cluster_refine`]);
//! 4. Adam steps on the mean KL divergence refine the model ([`refine_model`]).

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::fedcore::{ExperimentConfig, RoundState};
use crate::matrix::{LogitsMatrix, Matrix, ProbMatrix};
use crate::nn::{self, OptimizerState, ParamVector};
use crate::rng::{self, tag};

/// Tolerance for the row sums of every target matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Normalized logits are snapped to multiples of this step. Rescaling a
/// teacher's logits perturbs the standardized values by a few ulps; the grid
/// absorbs that so targets stay bit-identical under rescaling.
const LOGIT_GRID: f64 = 1.0 / (1u64 << 24) as f64;

/// Standard deviations below this are treated as constant logits.
const MIN_STD: f64 = 1e-12;

/// Classes whose centroid mass is below this get the maximal distance.
const MIN_CLASS_MASS: f64 = 1e-6;

/// Largest cosine distance.
const MAX_COSINE_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    AvgLogi,
    AvgProb,
    Rectified,
    Refined,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::AvgLogi => "avg_logi",
            Provenance::AvgProb => "avg_prob",
            Provenance::Rectified => "rectified",
            Provenance::Refined => "refined",
        }
    }
}

/// Row-stochastic `M x C` distillation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    probs: ProbMatrix,
    provenance: Provenance,
}

impl TeacherTargets {
    pub fn new(probs: ProbMatrix, provenance: Provenance) -> Result<Self> {
        for (row, r) in probs.row_iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                return Err(Error::NotStochastic { row, sum });
            }
        }
        Ok(Self { probs, provenance })
    }

    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_probs(self) -> ProbMatrix {
        self.probs
    }
}

/// Result of [`normalize_logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLogits {
    pub probs: ProbMatrix,
    /// Standard deviation of the raw logits over the whole pool.
    pub std: f64,
    /// Set when the logits were constant and uniform rows were returned.
    pub degenerate: bool,
}

/// Population standard deviation over every entry of `m`.
pub fn pooled_std(m: &Matrix) -> f64 {
    let xs = m.as_slice();
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `temperature * logits / std(logits)` with the standard deviation taken
/// over all classes of all pool samples. Not snapped to the grid.
pub fn standardized_logits(logits: &LogitsMatrix, temperature: f64) -> Result<(Matrix, f64)> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("teacher logits"));
    }
    let std = pooled_std(logits);
    Ok((logits.map(|z| temperature * (z / std)), std))
}

/// Magnitude-invariant teacher probabilities: `softmax(tau * f / std(f))`.
/// Constant logits fall back to uniform rows with a warning.
pub fn normalize_logits(logits: &LogitsMatrix, temperature: f64) -> Result<NormalizedLogits> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (mut z, std) = standardized_logits(logits, temperature)?;
    if std < MIN_STD || !std.is_finite() {
        warn!("teacher logits are constant over the pool (std = {std:e}); using uniform targets");
        let c = logits.cols();
        return Ok(NormalizedLogits {
            probs: Matrix::filled(logits.rows(), c, 1.0 / c as f64),
            std,
            degenerate: true,
        });
    }
    for v in z.as_mut_slice() {
        *v = (*v / LOGIT_GRID).round() * LOGIT_GRID;
    }
    Ok(NormalizedLogits {
        probs: nn::softmax(&z, 1.0)?,
        std,
        degenerate: false,
    })
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "teacher weights",
            expected: n,
            actual: weights.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one teacher".into()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

fn check_shapes(ms: &[&Matrix]) -> Result<()> {
    let first = ms[0];
    for m in &ms[1..] {
        if m.rows() != first.rows() {
            return Err(Error::DimensionMismatch {
                context: "teacher rows",
                expected: first.rows(),
                actual: m.rows(),
            });
        }
        if m.cols() != first.cols() {
            return Err(Error::DimensionMismatch {
                context: "teacher classes",
                expected: first.cols(),
                actual: m.cols(),
            });
        }
    }
    Ok(())
}

fn weighted_sum(ms: &[&Matrix], weights: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(ms[0].rows(), ms[0].cols());
    for (m, &w) in ms.iter().zip(weights) {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o += w * v;
        }
    }
    out
}

/// "AvgLogi": `softmax(sum_k w_k f_k)`.
pub fn avg_logi(logits: &[&LogitsMatrix], weights: &[f64]) -> Result<TeacherTargets> {
    check_weights(weights, logits.len())?;
    check_shapes(logits)?;
    let mixed = weighted_sum(logits, weights);
    TeacherTargets::new(nn::softmax(&mixed, 1.0)?, Provenance::AvgLogi)
}

/// "AvgProb": `sum_k w_k q_k`.
pub fn avg_prob(probs: &[&ProbMatrix], weights: &[f64]) -> Result<TeacherTargets> {
    check_weights(weights, probs.len())?;
    check_shapes(probs)?;
    TeacherTargets::new(weighted_sum(probs, weights), Provenance::AvgProb)
}

/// Rowwise Shannon entropy in nats.
pub fn entropies(probs: &ProbMatrix) -> Vec<f64> {
    probs
        .row_iter()
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}

/// Per-sample softmax over clients of their negative prediction entropies.
/// Returns a `clients x M` matrix whose columns sum to one.
pub fn entropy_weights(probs: &[&ProbMatrix]) -> Result<Matrix> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    check_shapes(probs)?;
    let ents: Vec<Vec<f64>> = probs.iter().map(|p| entropies(p)).collect();
    Ok(weights_from_entropies(&ents))
}

fn weights_from_entropies(ents: &[Vec<f64>]) -> Matrix {
    let (k, m) = (ents.len(), ents[0].len());
    let mut w = Matrix::zeros(k, m);
    let mut col = vec![0.0; k];
    for x in 0..m {
        for (c, e) in col.iter_mut().zip(ents) {
            *c = -e[x];
        }
        nn::softmax_row_inplace(&mut col, 1.0);
        for (j, &v) in col.iter().enumerate() {
            w.set(j, x, v);
        }
    }
    w
}

/// Local/global balance `u_t = 0.25 + 0.75 * mean(L_k) / ln C`, with each loss
/// clamped to `[0, ln C]` so that `u_t` stays in `[0.25, 1]`.
pub fn compute_ut(local_losses: &[f64], classes: usize) -> Result<f64> {
    if local_losses.is_empty() {
        return Err(Error::InvalidArgument("no local losses".into()));
    }
    if local_losses.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("local losses"));
    }
    let ln_c = (classes as f64).ln();
    let mean = local_losses.iter().map(|l| l.clamp(0.0, ln_c)).sum::<f64>() / local_losses.len() as f64;
    Ok(0.25 + 0.75 * mean / ln_c)
}

/// Normalized teacher predictions of one round over the pool.
#[derive(Debug, Clone)]
pub struct TeacherSet {
    locals: Vec<ProbMatrix>,
    global_before: ProbMatrix,
    global_after: ProbMatrix,
    /// `clients x M` prediction entropies of the local teachers.
    entropies: Matrix,
    local_losses: Vec<f64>,
}

impl TeacherSet {
    pub fn new(
        locals: Vec<ProbMatrix>,
        global_before: ProbMatrix,
        global_after: ProbMatrix,
        local_losses: Vec<f64>,
    ) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::InvalidArgument("teacher set without local models".into()));
        }
        if local_losses.len() != locals.len() {
            return Err(Error::DimensionMismatch {
                context: "local losses",
                expected: locals.len(),
                actual: local_losses.len(),
            });
        }
        let mut all: Vec<&Matrix> = locals.iter().collect();
        all.push(&global_before);
        all.push(&global_after);
        check_shapes(&all)?;
        let m = global_after.rows();
        let data: Vec<f64> = locals.iter().flat_map(entropies).collect();
        let entropies = Matrix::from_vec(locals.len(), m, data)?;
        Ok(Self {
            locals,
            global_before,
            global_after,
            entropies,
            local_losses,
        })
    }

    pub fn locals(&self) -> &[ProbMatrix] {
        &self.locals
    }

    pub fn global_before(&self) -> &ProbMatrix {
        &self.global_before
    }

    pub fn global_after(&self) -> &ProbMatrix {
        &self.global_after
    }

    pub fn entropies(&self) -> &Matrix {
        &self.entropies
    }

    pub fn local_losses(&self) -> &[f64] {
        &self.local_losses
    }

    pub fn num_classes(&self) -> usize {
        self.global_after.cols()
    }

    /// Per-sample entropy-weighted mixture of the local teachers.
    pub fn local_mixture(&self) -> Matrix {
        let ents: Vec<Vec<f64>> = self.entropies.row_iter().map(<[f64]>::to_vec).collect();
        let w = weights_from_entropies(&ents);
        let (m, c) = (self.global_after.rows(), self.num_classes());
        let mut out = Matrix::zeros(m, c);
        for (k, q) in self.locals.iter().enumerate() {
            for x in 0..m {
                let wk = w.get(k, x);
                for (o, &p) in out.row_mut(x).iter_mut().zip(q.row(x)) {
                    *o += wk * p;
                }
            }
        }
        out
    }
}

/// `u_t * mixture + (1 - u_t)/2 * (q_g(theta_t) + q_g(theta_{t+1}))`.
pub fn rectified_targets(teachers: &TeacherSet, u_t: f64) -> Result<TeacherTargets> {
    if !(0.0..=1.0).contains(&u_t) {
        return Err(Error::InvalidArgument(format!("u_t must lie in [0, 1], got {u_t}")));
    }
    let mut out = teachers.local_mixture();
    let g = 0.5 * (1.0 - u_t);
    for ((o, &a), &b) in out
        .as_mut_slice()
        .iter_mut()
        .zip(teachers.global_before.as_slice())
        .zip(teachers.global_after.as_slice())
    {
        *o = u_t * *o + g * (a + b);
    }
    TeacherTargets::new(out, Provenance::Rectified)
}

/// Soft class prototypes in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    /// `C x H`; rows of classes without mass are zero.
    pub centroids: Matrix,
    /// Total target probability per class over the pool.
    pub mass: Vec<f64>,
}

/// `v_c = sum_x q_c(x) h(x) / sum_x q_c(x)`.
pub fn build_centroids(targets: &TeacherTargets, features: &Matrix) -> Result<ClassCentroids> {
    let q = targets.probs();
    if q.rows() != features.rows() {
        return Err(Error::DimensionMismatch {
            context: "feature rows",
            expected: q.rows(),
            actual: features.rows(),
        });
    }
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::EmptyBatch("build_centroids"));
    }
    let (c, h) = (q.cols(), features.cols());
    let mut sums = Matrix::zeros(c, h);
    let mut mass = vec![0.0; c];
    for (qr, hr) in q.row_iter().zip(features.row_iter()) {
        for (class, &p) in qr.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            mass[class] += p;
            for (s, &v) in sums.row_mut(class).iter_mut().zip(hr) {
                *s += p * v;
            }
        }
    }
    for (class, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            sums.row_mut(class).iter_mut().for_each(|s| *s /= m);
        }
    }
    Ok(ClassCentroids { centroids: sums, mass })
}

/// `1 - cos(a, b)`; the maximal distance when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return MAX_COSINE_DISTANCE;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// One clustering step: `q(y = c | x) = softmax_c(-tau * D(h(x), v_c))`.
pub fn cluster_refine(centroids: &ClassCentroids, features: &Matrix, temperature: f64) -> Result<TeacherTargets> {
    if features.cols() != centroids.centroids.cols() {
        return Err(Error::DimensionMismatch {
            context: "feature width",
            expected: centroids.centroids.cols(),
            actual: features.cols(),
        });
    }
    let c = centroids.mass.len();
    let mut out = Matrix::zeros(features.rows(), c);
    for (x, hr) in features.row_iter().enumerate() {
        let row = out.row_mut(x);
        for (class, dst) in row.iter_mut().enumerate() {
            let d = if centroids.mass[class] < MIN_CLASS_MASS {
                MAX_COSINE_DISTANCE
            } else {
                cosine_distance(hr, centroids.centroids.row(class))
            };
            *dst = -temperature * d;
        }
        nn::softmax_row_inplace(row, 1.0);
    }
    TeacherTargets::new(out, Provenance::Refined)
}

/// Settings of the server-side distillation loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub round: usize,
}

/// Output of [`refine_model`]. Losses are full-pool mean KL values.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub params: ParamVector,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Adam on `mean KL(targets || softmax(f(x)))` over seeded pool minibatches.
/// The pool is visited in reshuffled passes.
pub fn refine_model(
    params: &ParamVector,
    pool_inputs: &Matrix,
    targets: &TeacherTargets,
    settings: DistillSettings,
) -> Result<Distilled> {
    let q = targets.probs();
    if q.rows() != pool_inputs.rows() {
        return Err(Error::DimensionMismatch {
            context: "target rows",
            expected: pool_inputs.rows(),
            actual: q.rows(),
        });
    }
    let (initial_loss, _) = nn::kl_distill_loss_grad(params, pool_inputs, q)?;
    if settings.steps == 0 {
        return Ok(Distilled {
            params: params.clone(),
            initial_loss,
            final_loss: initial_loss,
        });
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("distillation batch size must be >= 1".into()));
    }
    let mut rng = rng::stream(settings.seed, &[tag::DISTILL, settings.round as u64]);
    let m = pool_inputs.rows();
    let batch = settings.batch_size.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut theta = params.clone();
    let mut state = OptimizerState::adam(theta.len());
    let mut last_loss = initial_loss;
    for step in 0..settings.steps {
        if cursor + batch > m {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let (loss, grad) =
            nn::kl_distill_loss_grad(&theta, &pool_inputs.select_rows(idx), &q.select_rows(idx))?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::DistillDiverged {
                round: settings.round,
                step,
                last_loss,
            });
        }
        last_loss = loss;
        (theta, state) = nn::adam_step(theta, &grad, state, settings.lr)?;
    }
    let (final_loss, _) = nn::kl_distill_loss_grad(&theta, pool_inputs, q)?;
    if !final_loss.is_finite() {
        return Err(Error::DistillDiverged {
            round: settings.round,
            step: settings.steps,
            last_loss,
        });
    }
    Ok(Distilled {
        params: theta,
        initial_loss,
        final_loss,
    })
}

/// What a refinement stage produced in one round.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub params: ParamVector,
    pub targets: TeacherTargets,
    /// Local/global balance, when the rectified stage ran.
    pub u_t: Option<f64>,
    /// Whether the cluster stage ran this round.
    pub clustered: bool,
}

fn distill_settings(config: &ExperimentConfig, round: usize) -> DistillSettings {
    DistillSettings {
        steps: config.distill_steps,
        lr: config.distill_lr,
        batch_size: config.distill_batch_size,
        seed: config.seed,
        round,
    }
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Baseline ensemble distillation: AvgLogi over the local models, no
/// normalization.
pub fn feddf_round_refine(state: &RoundState, pool: &Matrix, config: &ExperimentConfig) -> Result<RefineOutput> {
    let logits = state
        .local_models
        .iter()
        .map(|p| nn::forward_logits(p, pool))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = logits.iter().collect();
    let targets = avg_logi(&refs, &uniform_weights(refs.len()))?;
    let distilled = refine_model(&state.aggregated, pool, &targets, distill_settings(config, state.round))?;
    Ok(RefineOutput {
        params: distilled.params,
        targets,
        u_t: None,
        clustered: false,
    })
}

/// Builds the distillation targets of one refinery round; stages are gated by
/// the config's ablation toggles.
pub fn mrtf_targets(
    state: &RoundState,
    pool: &Matrix,
    config: &ExperimentConfig,
) -> Result<(TeacherTargets, Option<f64>, bool)> {
    let tau = config.temperature;
    let normalized = |p: &ParamVector| -> Result<ProbMatrix> {
        Ok(normalize_logits(&nn::forward_logits(p, pool)?, tau)?.probs)
    };
    let locals = state
        .local_models
        .iter()
        .map(normalized)
        .collect::<Result<Vec<_>>>()?;

    let (mut targets, u_t) = if config.use_rectified {
        let teachers = TeacherSet::new(
            locals,
            normalized(&state.global_before)?,
            normalized(&state.aggregated)?,
            state.local_losses.clone(),
        )?;
        let u_t = compute_ut(teachers.local_losses(), teachers.num_classes())?;
        (rectified_targets(&teachers, u_t)?, Some(u_t))
    } else {
        let refs: Vec<&Matrix> = locals.iter().collect();
        (avg_prob(&refs, &uniform_weights(refs.len()))?, None)
    };

    let clustered = config.use_cluster_refinery && state.round >= config.cluster_skip_rounds;
    if clustered {
        let features = nn::extract_features(&state.aggregated, pool)?;
        let centroids = build_centroids(&targets, &features)?;
        targets = cluster_refine(&centroids, &features, tau)?;
    }
    Ok((targets, u_t, clustered))
}

/// One refinery round: targets from [`mrtf_targets`], then distillation of
/// the aggregated model.
pub fn mrtf_round_refine(state: &RoundState, pool: &Matrix, config: &ExperimentConfig) -> Result<RefineOutput> {
    let (targets, u_t, clustered) = mrtf_targets(state, pool, config)?;
    let distilled = refine_model(&state.aggregated, pool, &targets, distill_settings(config, state.round))?;
    Ok(RefineOutput {
        params: distilled.params,
        targets,
        u_t,
        clustered,
    })
}
