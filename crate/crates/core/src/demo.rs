//! The small ensemble demo: a few clients, each observing two classes, train
//! one local round from a shared initialization, and the server compares
//! the ensembles it could distill from.

use crate::data::{generate_blobs, partition_by_label, BlobSpec, DomainShift, LabeledDataset};
use crate::diagnostics::sgd_train_steps;
use crate::error::{Error, Result};
use crate::fedcore::{aggregate_average, initial_model, local_update, ExperimentConfig};
use crate::matrix::{argmax_rows, LogitsMatrix, ProbMatrix};
use crate::nn;
use crate::refinery::{self, TeacherSet, TeacherTargets};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub blobs: BlobSpec,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Participating clients; the split is made for `classes / classes_per_client`
    /// clients and the first `clients` of them take part.
    pub clients: usize,
    pub classes_per_client: usize,
    /// Centralized SGD steps (batch `batch_size`, rate `local_lr`) that
    /// produce the shared initialization; 0 keeps the random init.
    pub pretrain_steps: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    pub temperature: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            blobs: BlobSpec {
                classes: 10,
                dim: 20,
                separation: 6.0,
                seed: 0,
            },
            train_per_class: 100,
            test_per_class: 100,
            clients: 3,
            classes_per_client: 2,
            pretrain_steps: 0,
            local_epochs: 1,
            local_lr: 0.005,
            batch_size: 32,
            hidden_dims: vec![64, 32],
            temperature: 4.0,
        }
    }
}

/// Raw predictions of every model involved in one demo round, on the pool.
#[derive(Debug, Clone)]
pub struct DemoRound {
    pub pool: LabeledDataset,
    pub local_logits: Vec<LogitsMatrix>,
    pub local_losses: Vec<f64>,
    /// Shared initialization (the "previous" global model).
    pub before_logits: LogitsMatrix,
    /// Uniform parameter average of the locals.
    pub after_logits: LogitsMatrix,
    pub temperature: f64,
}

/// Runs the demo round for `seed` (blob means, split and initialization all
/// follow it).
pub fn demo_round(config: &DemoConfig, seed: u64) -> Result<DemoRound> {
    let blobs = BlobSpec {
        seed,
        ..config.blobs.clone()
    };
    let train = generate_blobs(&blobs, config.train_per_class, 0, &DomainShift::identity())?;
    let pool = generate_blobs(&blobs, config.test_per_class, 1, &DomainShift::identity())?;
    let split_clients = blobs.classes / config.classes_per_client.max(1);
    if config.clients == 0 || config.clients > split_clients {
        return Err(Error::InvalidArgument(format!(
            "demo needs 1..={split_clients} clients, got {}",
            config.clients
        )));
    }
    let shards = partition_by_label(&train, split_clients, config.classes_per_client, seed)?;
    let fed = ExperimentConfig {
        clients: config.clients,
        participation: 1.0,
        local_epochs: config.local_epochs,
        local_lr: config.local_lr,
        batch_size: config.batch_size,
        hidden_dims: config.hidden_dims.clone(),
        seed,
        ..Default::default()
    };
    let mut init = initial_model(&fed, train.dim(), train.num_classes())?;
    if config.pretrain_steps > 0 {
        let mut rng = rng::stream(seed, &[tag::DEMO]);
        init = sgd_train_steps(
            &init,
            &train,
            config.pretrain_steps,
            config.batch_size,
            config.local_lr,
            fed.momentum,
            &mut rng,
        )?;
    }
    let mut locals = Vec::with_capacity(config.clients);
    let mut local_losses = Vec::with_capacity(config.clients);
    for shard in shards.iter().take(config.clients) {
        let (model, loss) = local_update(&init, shard, &fed, 0)?;
        locals.push(model);
        local_losses.push(loss);
    }
    let uniform = vec![1.0 / locals.len() as f64; locals.len()];
    let aggregated = aggregate_average(&locals, &uniform)?;
    let x = pool.features();
    Ok(DemoRound {
        local_logits: locals
            .iter()
            .map(|p| nn::forward_logits(p, x))
            .collect::<Result<_>>()?,
        local_losses,
        before_logits: nn::forward_logits(&init, x)?,
        after_logits: nn::forward_logits(&aggregated, x)?,
        temperature: config.temperature,
        pool,
    })
}

impl DemoRound {
    fn normalized(&self, logits: &LogitsMatrix) -> Result<ProbMatrix> {
        Ok(refinery::normalize_logits(logits, self.temperature)?.probs)
    }

    pub fn avg_logi(&self, weights: &[f64]) -> Result<TeacherTargets> {
        let refs: Vec<&LogitsMatrix> = self.local_logits.iter().collect();
        refinery::avg_logi(&refs, weights)
    }

    /// AvgProb over plain `softmax(f_k)`.
    pub fn avg_prob(&self, weights: &[f64]) -> Result<TeacherTargets> {
        let probs = self
            .local_logits
            .iter()
            .map(|l| nn::softmax(l, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ProbMatrix> = probs.iter().collect();
        refinery::avg_prob(&refs, weights)
    }

    /// AvgProb over normalized local predictions (stabilized teachers).
    pub fn stabilized_avg_prob(&self, weights: &[f64]) -> Result<TeacherTargets> {
        let probs = self
            .local_logits
            .iter()
            .map(|l| self.normalized(l))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ProbMatrix> = probs.iter().collect();
        refinery::avg_prob(&refs, weights)
    }

    /// Entropy-weighted locals blended with both global models.
    pub fn rectified(&self) -> Result<TeacherTargets> {
        let locals = self
            .local_logits
            .iter()
            .map(|l| self.normalized(l))
            .collect::<Result<Vec<_>>>()?;
        let teachers = TeacherSet::new(
            locals,
            self.normalized(&self.before_logits)?,
            self.normalized(&self.after_logits)?,
            self.local_losses.clone(),
        )?;
        let u = refinery::compute_ut(teachers.local_losses(), teachers.num_classes())?;
        refinery::rectified_targets(&teachers, u)
    }

    pub fn uniform_weights(&self) -> Vec<f64> {
        vec![1.0 / self.local_logits.len() as f64; self.local_logits.len()]
    }

    /// Argmax accuracy of `targets` against the pool labels.
    pub fn accuracy(&self, targets: &TeacherTargets) -> f64 {
        let labels = self.pool.labels();
        let hits = argmax_rows(targets.probs())
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}
