//! Datasets, synthetic domains and Non-IID partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, tag, StreamRng};

pub use crate::idx::load_idx;

/// Labeled samples `(x, y)`, `y < num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyBatch("LabeledDataset::new"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx`, in the given order. `idx` must be non-empty.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }
}

/// The server-held to-be-inferred samples. Labels are kept for evaluation
/// only; training code receives the features alone.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    features: Matrix,
    eval_labels: Vec<usize>,
    num_classes: usize,
}

impl UnlabeledPool {
    pub fn from_dataset(ds: LabeledDataset) -> Self {
        Self {
            features: ds.features,
            eval_labels: ds.labels,
            num_classes: ds.num_classes,
        }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub(crate) fn eval_labels(&self) -> &[usize] {
        &self.eval_labels
    }
}

/// Transform turning the source domain into a shifted target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// Seed of the orthogonal rotation; `None` means no rotation.
    pub rotation_seed: Option<u64>,
    /// Norm of the per-class mean offset (seeded direction per class).
    pub mean_offset: f64,
    /// Multiplier on the unit noise.
    pub noise_scale: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            rotation_seed: None,
            mean_offset: 0.0,
            noise_scale: 1.0,
        }
    }

    /// Rotation + unit mean offset + 1.5x noise.
    pub fn standard(seed: u64) -> Self {
        Self {
            rotation_seed: Some(seed),
            mean_offset: 1.0,
            noise_scale: 1.5,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_seed.is_none() && self.mean_offset == 0.0 && self.noise_scale == 1.0
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

/// A family of Gaussian class blobs. Class means are a function of
/// `(classes, dim, separation, seed)` only, so independent draws (train
/// set, server pool) come from one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Typical distance between two class means, in noise standard deviations.
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "blobs need classes >= 2 and dim >= 2, got {} and {}",
                self.classes, self.dim
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "separation must be finite and >= 0, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    /// Class means, `classes x dim`.
    pub fn means(&self) -> Matrix {
        let mut rng = rng::stream(self.seed, &[tag::BLOBS, 0]);
        let scale = self.separation / (2.0 * self.dim as f64).sqrt();
        let data = (0..self.classes * self.dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(self.classes, self.dim, data).expect("shape")
    }
}

fn gaussian_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Seeded random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let mut rng = rng::stream(seed, &[tag::BLOBS, 2]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(&mut rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_vec(dim, dim, basis.concat()).expect("shape")
}

/// Draws `n_per_class` samples of every class, class-major order. `draw`
/// selects an independent sample stream (e.g. 0 for training, 1 for the pool).
pub fn generate_blobs(
    spec: &BlobSpec,
    n_per_class: usize,
    draw: u64,
    shift: &DomainShift,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let (c, d) = (spec.classes, spec.dim);
    let means = spec.means();
    let offsets = if shift.mean_offset != 0.0 {
        let mut rng = rng::stream(spec.seed, &[tag::BLOBS, 3, shift.rotation_seed.unwrap_or(0)]);
        let mut m = Matrix::zeros(c, d);
        for k in 0..c {
            let v = gaussian_vec(&mut rng, d);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (dst, x) in m.row_mut(k).iter_mut().zip(v) {
                *dst = shift.mean_offset * x / n;
            }
        }
        Some(m)
    } else {
        None
    };
    let rotation = shift.rotation_seed.map(|s| random_rotation(d, s));

    let mut rng = rng::stream(spec.seed, &[tag::BLOBS, 1, draw]);
    let mut features = Matrix::zeros(c * n_per_class, d);
    let mut labels = Vec::with_capacity(c * n_per_class);
    let mut x = vec![0.0; d];
    for k in 0..c {
        for i in 0..n_per_class {
            for (j, xj) in x.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *xj = means.get(k, j) + shift.noise_scale * noise;
            }
            if let Some(off) = &offsets {
                for (xj, o) in x.iter_mut().zip(off.row(k)) {
                    *xj += o;
                }
            }
            let row = features.row_mut(k * n_per_class + i);
            match &rotation {
                Some(q) => {
                    for (r, dst) in row.iter_mut().enumerate() {
                        *dst = q.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
                    }
                }
                None => row.copy_from_slice(&x),
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(features, labels, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionStrategy {
    /// Every client observes exactly `classes_per_client` classes.
    ByLabel { classes_per_client: usize },
    /// Per-client class proportions drawn from a symmetric Dirichlet.
    ByDirichlet { alpha: f64 },
    /// Uniform random split.
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn apply(&self, src: &LabeledDataset) -> Result<Vec<ClientShard>> {
        match self.strategy {
            PartitionStrategy::ByLabel { classes_per_client } => {
                partition_by_label(src, self.clients, classes_per_client, self.seed)
            }
            PartitionStrategy::ByDirichlet { alpha } => {
                partition_by_dirichlet(src, self.clients, alpha, self.seed)
            }
            PartitionStrategy::Iid => partition_iid(src, self.clients, self.seed),
        }
    }
}

/// One client's local data plus the source indices it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub dataset: LabeledDataset,
    pub source_indices: Vec<usize>,
}

impl ClientShard {
    pub fn n_k(&self) -> usize {
        self.dataset.len()
    }

    /// Number of classes with at least `min_samples` samples.
    pub fn observed_classes(&self, min_samples: usize) -> usize {
        self.dataset
            .class_counts()
            .into_iter()
            .filter(|&n| n >= min_samples && n > 0)
            .count()
    }
}

fn shards_from_indices(src: &LabeledDataset, mut assignment: Vec<Vec<usize>>) -> Result<Vec<ClientShard>> {
    assignment
        .iter_mut()
        .enumerate()
        .map(|(client_id, idx)| {
            idx.sort_unstable();
            Ok(ClientShard {
                client_id,
                dataset: src.subset(idx)?,
                source_indices: std::mem::take(idx),
            })
        })
        .collect()
}

fn indices_by_class(src: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); src.num_classes()];
    for (i, &y) in src.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

fn check_clients(src: &LabeledDataset, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if clients > src.len() {
        return Err(Error::PartitionUnsatisfiable(format!(
            "{clients} clients but only {} samples",
            src.len()
        )));
    }
    Ok(())
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let (base, extra) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// "Split by label": client `k` owns the `classes_per_client` consecutive
/// entries starting at `k * classes_per_client` of a seeded cyclic class
/// order, and every class's samples are divided evenly among its owners.
pub fn partition_by_label(
    src: &LabeledDataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    check_clients(src, clients)?;
    let c = src.num_classes();
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::InvalidArgument(format!(
            "classes per client must lie in [1, {c}], got {classes_per_client}"
        )));
    }
    if clients * classes_per_client < c {
        return Err(Error::PartitionUnsatisfiable(format!(
            "{clients} clients x {classes_per_client} classes cannot cover all {c} classes"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::PARTITION, 0]);
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);

    let mut owners = vec![Vec::new(); c];
    for k in 0..clients {
        for j in 0..classes_per_client {
            owners[order[(k * classes_per_client + j) % c]].push(k);
        }
    }

    let mut assignment = vec![Vec::new(); clients];
    for (class, mut idx) in indices_by_class(src).into_iter().enumerate() {
        let own = &owners[class];
        if idx.len() < own.len() {
            return Err(Error::PartitionUnsatisfiable(format!(
                "class {class} has {} samples for {} owning clients",
                idx.len(),
                own.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (chunk, &k) in even_chunks(&idx, own.len()).into_iter().zip(own) {
            assignment[k].extend_from_slice(chunk);
        }
    }
    shards_from_indices(src, assignment)
}

/// Symmetric Dirichlet draw, computed by normalizing Gamma(alpha, 1) samples.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let g: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return g.into_iter().map(|v| v / sum).collect();
        }
    }
}

/// Largest-remainder apportionment of `total` items by `weights`; ties in the
/// remainder go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let weights: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        weights.iter().map(|w| w / sum).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    };
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per-client class proportions of a Dirichlet split, `clients x classes`.
pub fn dirichlet_proportions(classes: usize, clients: usize, alpha: f64, seed: u64) -> Matrix {
    let mut rng = rng::stream(seed, &[tag::PARTITION, 1]);
    let data = (0..clients)
        .flat_map(|_| sample_dirichlet(&mut rng, alpha, classes))
        .collect();
    Matrix::from_vec(clients, classes, data).expect("shape")
}

/// "Split by dirichlet": client `k` draws class proportions `p_k ~ Dir(alpha)`;
/// the samples of class `c` go to clients in proportion to `p_k(c)`, rounded
/// by largest remainder so class totals are kept exactly. Empty shards are
/// repaired by moving one random sample from the largest shard.
pub fn partition_by_dirichlet(
    src: &LabeledDataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    check_clients(src, clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let c = src.num_classes();
    let props = dirichlet_proportions(c, clients, alpha, seed);
    let mut rng = rng::stream(seed, &[tag::PARTITION, 2]);
    let mut assignment = vec![Vec::new(); clients];
    for (class, mut idx) in indices_by_class(src).into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let column: Vec<f64> = (0..clients).map(|k| props.get(k, class)).collect();
        let counts = apportion(idx.len(), &column);
        let mut start = 0;
        for (k, n) in counts.into_iter().enumerate() {
            assignment[k].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    while let Some(empty) = assignment.iter().position(|a| a.is_empty()) {
        let largest = (0..clients)
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("clients >= 1");
        let pick = rng.random_range(0..assignment[largest].len());
        let moved = assignment[largest].swap_remove(pick);
        assignment[empty].push(moved);
    }
    shards_from_indices(src, assignment)
}

/// Uniformly random split into near-equal shards.
pub fn partition_iid(src: &LabeledDataset, clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    check_clients(src, clients)?;
    let mut rng = rng::stream(seed, &[tag::PARTITION, 3]);
    let mut idx: Vec<usize> = (0..src.len()).collect();
    idx.shuffle(&mut rng);
    let assignment = even_chunks(&idx, clients).into_iter().map(<[usize]>::to_vec).collect();
    shards_from_indices(src, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, n: usize) -> LabeledDataset {
        let spec = BlobSpec {
            classes,
            dim: 4,
            separation: 4.0,
            seed: 11,
        };
        generate_blobs(&spec, n, 0, &DomainShift::identity()).unwrap()
    }

    fn assert_partition(src: &LabeledDataset, shards: &[ClientShard]) {
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..src.len()).collect::<Vec<_>>());
        for s in shards {
            assert_eq!(s.n_k(), s.source_indices.len());
            for (row, &i) in s.source_indices.iter().enumerate() {
                assert_eq!(s.dataset.labels()[row], src.labels()[i]);
                assert_eq!(s.dataset.features().row(row), src.features().row(i));
            }
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(Matrix::zeros(0, 2), vec![], 2).is_err());
        assert!(LabeledDataset::new(Matrix::zeros(1, 2), vec![2], 2).is_err());
        assert!(LabeledDataset::new(Matrix::zeros(2, 2), vec![0], 2).is_err());
    }

    #[test]
    fn blobs_are_deterministic_and_identity_shift_is_noop() {
        let spec = BlobSpec {
            classes: 3,
            dim: 5,
            separation: 3.0,
            seed: 9,
        };
        let a = generate_blobs(&spec, 7, 0, &DomainShift::identity()).unwrap();
        let b = generate_blobs(&spec, 7, 0, &DomainShift::identity()).unwrap();
        assert_eq!(a, b);
        let other_draw = generate_blobs(&spec, 7, 1, &DomainShift::identity()).unwrap();
        assert_ne!(a, other_draw);
        let shifted = generate_blobs(&spec, 7, 0, &DomainShift::standard(1)).unwrap();
        assert_ne!(a, shifted);
        assert_eq!(a.class_counts(), vec![7, 7, 7]);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = random_rotation(6, 3);
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blob_precondition_errors() {
        let bad = BlobSpec {
            classes: 1,
            dim: 4,
            separation: 1.0,
            seed: 0,
        };
        assert!(generate_blobs(&bad, 3, 0, &DomainShift::identity()).is_err());
    }

    #[test]
    fn by_label_single_client_all_classes_is_identity() {
        let src = blobs(5, 6);
        let shards = partition_by_label(&src, 1, 5, 3).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].dataset, src);
    }

    #[test]
    fn by_label_five_clients_five_classes_each() {
        let src = blobs(10, 20);
        let shards = partition_by_label(&src, 5, 5, 42).unwrap();
        assert_partition(&src, &shards);
        for s in &shards {
            assert_eq!(s.observed_classes(1), 5);
            // classes within a client are near balanced
            let counts: Vec<usize> = s.dataset.class_counts().into_iter().filter(|&n| n > 0).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn by_label_unsatisfiable() {
        let src = blobs(10, 2);
        assert!(matches!(
            partition_by_label(&src, 2, 3, 0),
            Err(Error::PartitionUnsatisfiable(_))
        ));
        // 30 clients x 2 classes = 6 owners per class but only 2 samples each
        assert!(matches!(
            partition_by_label(&src, 30, 2, 0),
            Err(Error::PartitionUnsatisfiable(_))
        ));
        assert!(partition_by_label(&src, 2, 11, 0).is_err());
    }

    #[test]
    fn dirichlet_single_client_is_identity() {
        let src = blobs(4, 5);
        for alpha in [0.01, 1.0, 100.0] {
            let shards = partition_by_dirichlet(&src, 1, alpha, 8).unwrap();
            assert_eq!(shards[0].dataset, src);
        }
    }

    #[test]
    fn dirichlet_repairs_empty_shards() {
        let src = blobs(3, 4);
        for seed in 0..20 {
            let shards = partition_by_dirichlet(&src, 12, 0.05, seed).unwrap();
            assert_partition(&src, &shards);
            assert!(shards.iter().all(|s| s.n_k() >= 1));
        }
        assert!(partition_by_dirichlet(&src, 13, 1.0, 0).is_err());
        assert!(partition_by_dirichlet(&src, 2, 0.0, 0).is_err());
    }

    #[test]
    fn dirichlet_proportions_sum_to_one() {
        let p = dirichlet_proportions(10, 7, 0.1, 5);
        for r in p.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn apportion_conserves_totals() {
        assert_eq!(apportion(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(apportion(3, &[0.0, 0.0]), vec![2, 1]);
        assert_eq!(apportion(7, &[0.1, 0.3, 0.6]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn iid_split_is_balanced_partition() {
        let src = blobs(3, 10);
        let shards = partition_iid(&src, 4, 1).unwrap();
        assert_partition(&src, &shards);
        let sizes: Vec<usize> = shards.iter().map(ClientShard::n_k).collect();
        assert_eq!(sizes, vec![8, 8, 7, 7]);
    }
}
