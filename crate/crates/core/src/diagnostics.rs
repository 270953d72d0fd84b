//! Evaluation and divergence measurement.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::data::{generate_blobs, BlobSpec, DomainShift, LabeledDataset, PartitionSpec, PartitionStrategy, UnlabeledPool};
use crate::error::{Error, Result};
use crate::fedcore::aggregate_average;
use crate::matrix::{argmax, Matrix};
use crate::nn::{self, MlpArch, OptimizerState, ParamVector};
use crate::refinery::TeacherTargets;
use crate::rng::{self, tag, StreamRng};

/// Per-round curves recorded by the federation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_aggregated: f64,
    pub acc_refined: f64,
    /// Accuracy of the argmax of the round's teacher targets.
    pub acc_ensemble: f64,
    pub mean_local_loss: f64,
    pub u_t: f64,
    pub gradient_variance: f64,
    /// Not part of any persisted output; varies between runs.
    pub wallclock_secs: f64,
}

fn label_accuracy(predictions: impl Iterator<Item = usize>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let hits = predictions.zip(labels).filter(|(p, y)| p == *y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of rows whose argmax logit (ties to the lowest class) matches the label.
pub fn accuracy(params: &ParamVector, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            context: "accuracy labels",
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let classes = params.arch().num_classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let logits = nn::forward_logits(params, features)?;
    label_accuracy(logits.row_iter().map(argmax), labels)
}

pub fn dataset_accuracy(params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    accuracy(params, data.features(), data.labels())
}

/// Accuracy of a model on the pool's held-out labels.
pub fn pool_accuracy(params: &ParamVector, pool: &UnlabeledPool) -> Result<f64> {
    accuracy(params, pool.features(), pool.eval_labels())
}

/// Accuracy of the argmax of teacher targets on the pool's held-out labels.
pub fn targets_accuracy(targets: &TeacherTargets, pool: &UnlabeledPool) -> Result<f64> {
    let q = targets.probs();
    if q.rows() != pool.len() {
        return Err(Error::DimensionMismatch {
            context: "target rows",
            expected: pool.len(),
            actual: q.rows(),
        });
    }
    label_accuracy(q.row_iter().map(argmax), pool.eval_labels())
}

/// `(1/K) sum_k ||theta_k - theta_agg||^2`.
pub fn gradient_variance(locals: &[ParamVector], aggregated: &ParamVector) -> Result<f64> {
    if locals.is_empty() {
        return Err(Error::InvalidArgument("no local models".into()));
    }
    for m in locals {
        if m.len() != aggregated.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient variance",
                expected: aggregated.len(),
                actual: m.len(),
            });
        }
    }
    // per-model terms are summed in sorted order so the result is
    // permutation invariant bit for bit
    let mut terms: Vec<f64> = locals.iter().map(|m| m.sub(aggregated).norm_sq()).collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / locals.len() as f64)
}

/// `||theta_agg - theta_cen||^2 / ||theta_cen||^2`.
pub fn weight_divergence(aggregated: &ParamVector, centralized: &ParamVector) -> Result<f64> {
    if aggregated.len() != centralized.len() {
        return Err(Error::DimensionMismatch {
            context: "weight divergence",
            expected: centralized.len(),
            actual: aggregated.len(),
        });
    }
    let mut num: Vec<f64> = aggregated
        .values()
        .iter()
        .zip(centralized.values())
        .map(|(a, c)| (a - c) * (a - c))
        .collect();
    let mut den: Vec<f64> = centralized.values().iter().map(|c| c * c).collect();
    num.sort_by(f64::total_cmp);
    den.sort_by(f64::total_cmp);
    let den: f64 = den.iter().sum();
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(num.iter().sum::<f64>() / den)
}

/// `steps` minibatch SGD-momentum steps on `data`, cycling through reshuffled
/// passes. Returns the trained model.
pub fn sgd_train_steps(
    params: &ParamVector,
    data: &LabeledDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    let n = data.len();
    let batch = batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut theta = params.clone();
    let mut state = OptimizerState::sgd(theta.len());
    for _ in 0..steps {
        if cursor + batch > n {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = data.features().select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let (_, grad) = nn::cross_entropy_loss_grad(&theta, &x, &y)?;
        (theta, state) = nn::sgd_momentum_step(theta, &grad, state, lr, momentum)?;
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("probe training"));
    }
    Ok(theta)
}

/// One Non-IID level of the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLevel {
    pub name: String,
    pub strategy: PartitionStrategy,
}

/// Settings of the one-shot divergence probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub blobs: BlobSpec,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden_dims: Vec<usize>,
    pub clients: usize,
    /// SGD steps after pretraining, both centralized and per client.
    pub steps: usize,
    /// Pretraining step counts to sweep.
    pub pretrain_steps: Vec<usize>,
    pub levels: Vec<ProbeLevel>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            blobs: BlobSpec {
                classes: 10,
                dim: 20,
                separation: 4.0,
                seed: 0,
            },
            train_per_class: 200,
            test_per_class: 100,
            hidden_dims: vec![64, 32],
            clients: 10,
            steps: 50,
            pretrain_steps: vec![0, 20, 100, 400],
            levels: vec![
                ProbeLevel {
                    name: "iid".into(),
                    strategy: PartitionStrategy::ByDirichlet { alpha: 10.0 },
                },
                ProbeLevel {
                    name: "dir1.0".into(),
                    strategy: PartitionStrategy::ByDirichlet { alpha: 1.0 },
                },
                ProbeLevel {
                    name: "dir0.1".into(),
                    strategy: PartitionStrategy::ByDirichlet { alpha: 0.1 },
                },
            ],
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// One row of the probe report.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub pretrain_steps: usize,
    pub level: String,
    pub gradient_variance: f64,
    pub weight_divergence: f64,
    pub acc_init: f64,
    pub acc_centralized: f64,
    pub acc_aggregated: f64,
}

impl ProbeRow {
    /// Centralized minus aggregated accuracy.
    pub fn accuracy_gap(&self) -> f64 {
        self.acc_centralized - self.acc_aggregated
    }
}

pub const PROBE_CSV_HEADER: &str =
    "pretrain_steps,level,gradient_variance,weight_divergence,acc_init,acc_centralized,acc_aggregated";

/// Pretrain for `r0` steps, then compare `steps` more centralized steps with
/// one round of `steps` local steps on each of `clients` split clients.
pub fn divergence_probe(config: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if config.clients == 0 || config.steps == 0 {
        return Err(Error::InvalidArgument("probe needs clients >= 1 and steps >= 1".into()));
    }
    let train = generate_blobs(&config.blobs, config.train_per_class, 0, &DomainShift::identity())?;
    let test = generate_blobs(&config.blobs, config.test_per_class, 1, &DomainShift::identity())?;
    let arch = std::sync::Arc::new(MlpArch::new(
        train.dim(),
        config.hidden_dims.clone(),
        train.num_classes(),
    )?);
    let init = ParamVector::init(arch, &mut rng::stream(config.seed, &[tag::PROBE, 0]));
    let splits = config
        .levels
        .iter()
        .map(|level| {
            PartitionSpec {
                strategy: level.strategy,
                clients: config.clients,
                seed: config.seed,
            }
            .apply(&train)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &r0 in &config.pretrain_steps {
        let train_steps = |params: &ParamVector, data: &LabeledDataset, steps: usize, path: &[u64]| {
            let mut full = vec![tag::PROBE, r0 as u64];
            full.extend_from_slice(path);
            sgd_train_steps(
                params,
                data,
                steps,
                config.batch_size,
                config.lr,
                config.momentum,
                &mut rng::stream(config.seed, &full),
            )
        };
        let theta0 = train_steps(&init, &train, r0, &[1])?;
        let centralized = train_steps(&theta0, &train, config.steps, &[2])?;
        let acc_init = dataset_accuracy(&theta0, &test)?;
        let acc_centralized = dataset_accuracy(&centralized, &test)?;
        for (li, (level, shards)) in config.levels.iter().zip(&splits).enumerate() {
            let locals = shards
                .iter()
                .map(|s| train_steps(&theta0, &s.dataset, config.steps, &[3, li as u64, s.client_id as u64]))
                .collect::<Result<Vec<_>>>()?;
            let weights = vec![1.0 / locals.len() as f64; locals.len()];
            let aggregated = aggregate_average(&locals, &weights)?;
            rows.push(ProbeRow {
                pretrain_steps: r0,
                level: level.name.clone(),
                gradient_variance: gradient_variance(&locals, &aggregated)?,
                weight_divergence: weight_divergence(&aggregated, &centralized)?,
                acc_init,
                acc_centralized,
                acc_aggregated: dataset_accuracy(&aggregated, &test)?,
            });
        }
    }
    Ok(rows)
}

/// Writes the probe report as CSV with a header row.
pub fn write_probe_csv<W: Write>(rows: &[ProbeRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{PROBE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.pretrain_steps,
            r.level,
            r.gradient_variance,
            r.weight_divergence,
            r.acc_init,
            r.acc_centralized,
            r.acc_aggregated
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn pv(values: Vec<f64>) -> ParamVector {
        let a = Arc::new(MlpArch::new(1, vec![], 2).unwrap());
        ParamVector::from_values(a, values).unwrap()
    }

    #[test]
    fn accuracy_extremes() {
        // identity linear layer on 2-d input: argmax = larger coordinate
        let a = Arc::new(MlpArch::new(2, vec![], 2).unwrap());
        let p = ParamVector::from_values(a, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]);
        assert_eq!(accuracy(&p, &x, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &x, &[1, 0, 1]).unwrap(), 0.0);
        assert!(accuracy(&p, &Matrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn uniform_model_accuracy_is_class_zero_frequency() {
        let a = Arc::new(MlpArch::new(3, vec![4], 10).unwrap());
        let p = ParamVector::zeros(a);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let x = Matrix::zeros(50, 3);
        assert_eq!(accuracy(&p, &x, &labels).unwrap(), 0.1);
    }

    #[test]
    fn gradient_variance_cases() {
        let agg = pv(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gradient_variance(&[agg.clone(), agg.clone()], &agg).unwrap(), 0.0);
        let v = pv(vec![0.5, -1.0, 0.0, 2.0]);
        let plus = agg.add(&v);
        let minus = agg.sub(&v);
        let gv = gradient_variance(&[plus, minus], &agg).unwrap();
        assert!((gv - v.norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn weight_divergence_cases() {
        let c = pv(vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(weight_divergence(&c, &c).unwrap(), 0.0);
        assert!((weight_divergence(&c.scale(2.0), &c).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            weight_divergence(&c, &pv(vec![0.0; 4])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn probe_csv_has_header() {
        let row = ProbeRow {
            pretrain_steps: 5,
            level: "iid".into(),
            gradient_variance: 0.5,
            weight_divergence: 0.25,
            acc_init: 0.1,
            acc_centralized: 0.9,
            acc_aggregated: 0.8,
        };
        let mut buf = Vec::new();
        write_probe_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{PROBE_CSV_HEADER}\n5,iid,0.5,0.25,0.1,0.9,0.8\n"));
    }
}
