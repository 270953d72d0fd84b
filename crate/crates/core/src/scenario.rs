//! Builds the data side of an experiment: a centralized training set split
//! onto clients, and the server's unlabeled pool.

use std::path::PathBuf;

use crate::data::{
    generate_blobs, load_idx, BlobSpec, ClientShard, DomainShift, LabeledDataset, PartitionSpec, PartitionStrategy,
    UnlabeledPool,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        spec: BlobSpec,
        train_per_class: usize,
        test_per_class: usize,
        /// Shift of the training domain.
        train_shift: DomainShift,
        /// Shift of the pool domain; differs from `train_shift` in the
        /// cross-domain setting.
        pool_shift: DomainShift,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` samples of each file, if set.
        max_train: Option<usize>,
        max_test: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub source: DataSource,
    pub partition: PartitionStrategy,
    pub clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub train: LabeledDataset,
    pub shards: Vec<ClientShard>,
    pub pool: UnlabeledPool,
}

fn truncate(ds: LabeledDataset, limit: Option<usize>) -> Result<LabeledDataset> {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => Ok(ds),
    }
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<Scenario> {
        let (train, test) = match &self.source {
            DataSource::Blobs {
                spec,
                train_per_class,
                test_per_class,
                train_shift,
                pool_shift,
            } => (
                generate_blobs(spec, *train_per_class, 0, train_shift)?,
                generate_blobs(spec, *test_per_class, 1, pool_shift)?,
            ),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                max_train,
                max_test,
            } => (
                truncate(load_idx(train_images, train_labels)?, *max_train)?,
                truncate(load_idx(test_images, test_labels)?, *max_test)?,
            ),
        };
        if train.dim() != test.dim() {
            return Err(Error::DimensionMismatch {
                context: "train/test feature width",
                expected: train.dim(),
                actual: test.dim(),
            });
        }
        let classes = train.num_classes().max(test.num_classes());
        let train = LabeledDataset::new(train.features().clone(), train.labels().to_vec(), classes)?;
        let test = LabeledDataset::new(test.features().clone(), test.labels().to_vec(), classes)?;
        let shards = PartitionSpec {
            strategy: self.partition,
            clients: self.clients,
            seed: self.seed,
        }
        .apply(&train)?;
        Ok(Scenario {
            train,
            shards,
            pool: UnlabeledPool::from_dataset(test),
        })
    }
}
