//! Synthetic labelled data, label-skew partitioning across clients, and the
//! class-overlap heterogeneity metric.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = match inputs.shape() {
            [n, _] => *n,
            s => {
                return Err(Error::dim(
                    "LabeledDataset",
                    format!("inputs must be [n x d], got {s:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::dim(
                "LabeledDataset",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of every sample of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Smallest allowed distance between two class centres, as a multiple of
/// `spread` (with a floor so that `spread = 0` still yields distinct centres).
const CENTER_SEPARATION: f64 = 4.0;

/// Isotropic Gaussian blobs, `per_class` samples per class, stored class by
/// class. Centres are seeded random directions rescaled so that the closest
/// pair sits exactly `4 * max(spread, 0.25)` apart.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "make_blobs needs >= 2 classes, >= 1 sample per class and dim >= 1 (got {num_classes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "spread must be finite and non-negative, got {spread}"
        )));
    }
    let mut center_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xb10b));
    let mut centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| center_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            min_dist = min_dist.min(dist(&centers[i], &centers[j]));
        }
    }
    let target = CENTER_SEPARATION * spread.max(0.25);
    let k = target / min_dist;
    for c in &mut centers {
        for v in c.iter_mut() {
            *v *= k;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xda7a));
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(c + spread * noise);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(
        Tensor::matrix(labels.len(), dim, data)?,
        labels,
        num_classes,
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Sorted sample indices per client.
    pub assignments: Vec<Vec<usize>>,
    /// `class_count_matrix[i][j]`: samples of class `j` on client `i`.
    pub class_count_matrix: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition from per-client index lists, checking that they are
    /// disjoint and valid for `dataset`.
    pub fn from_assignments(
        dataset: &LabeledDataset,
        mut assignments: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mut seen = vec![false; dataset.len()];
        let mut matrix = vec![vec![0; dataset.num_classes]; assignments.len()];
        for (client, idx) in assignments.iter_mut().enumerate() {
            idx.sort_unstable();
            for &i in idx.iter() {
                if i >= dataset.len() {
                    return Err(Error::Format(format!(
                        "client {client} references sample {i} of {}",
                        dataset.len()
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Format(format!("sample {i} assigned more than once")));
                }
                matrix[client][dataset.labels[i]] += 1;
            }
        }
        Ok(Partition {
            assignments,
            class_count_matrix: matrix,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_count_matrix.first().map_or(0, Vec::len)
    }

    /// Number of clients holding at least one sample of each class.
    pub fn holders_per_class(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|j| {
                self.class_count_matrix
                    .iter()
                    .filter(|row| row[j] > 0)
                    .count()
            })
            .collect()
    }

    pub fn class_totals(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|j| self.class_count_matrix.iter().map(|row| row[j]).sum())
            .collect()
    }

    /// Classes with at least one sample on `client`.
    pub fn client_classes(&self, client: usize) -> Vec<usize> {
        self.class_count_matrix[client]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PartitionFile {
            num_clients: self.num_clients(),
            num_classes: self.num_classes(),
            dh: distributional_heterogeneity(self)?,
            assignments: self.assignments.clone(),
            class_count_matrix: self.class_count_matrix.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses an exported partition and re-validates it against `dataset`.
    pub fn from_json(json: &str, dataset: &LabeledDataset) -> Result<Self> {
        let file: PartitionFile = serde_json::from_str(json)?;
        if file.num_classes != dataset.num_classes || file.assignments.len() != file.num_clients {
            return Err(Error::Format(
                "partition header does not match its contents or the dataset".into(),
            ));
        }
        let p = Partition::from_assignments(dataset, file.assignments)?;
        if p.class_count_matrix != file.class_count_matrix {
            return Err(Error::Format(
                "class_count_matrix disagrees with the assignments".into(),
            ));
        }
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionFile {
    num_clients: usize,
    num_classes: usize,
    dh: f64,
    assignments: Vec<Vec<usize>>,
    class_count_matrix: Vec<Vec<usize>>,
}

/// Label-skew partition. Every client gets `classes_per_client` consecutive
/// classes from a seeded shuffle of the class list, wrapping round-robin so
/// that all classes are covered. Each holder `i` of class `c` draws
/// `s_ic ~ U(0.4, 0.6)` and receives `floor(n_c * s_ic / sum_k s_kc)` of the
/// class's samples; the rounding residue goes to the holder with the largest
/// draw.
pub fn partition(
    dataset: &LabeledDataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    let n_classes = dataset.num_classes;
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > n_classes {
        return Err(Error::Config(format!(
            "classes_per_client must lie in [1, {n_classes}], got {classes_per_client}"
        )));
    }
    if num_clients * classes_per_client < n_classes {
        return Err(Error::Config(format!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes"
        )));
    }
    let by_class = dataset.indices_by_class();
    if let Some(j) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("class {j} has no samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9a27));
    let mut class_order: Vec<usize> = (0..n_classes).collect();
    class_order.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for client in 0..num_clients {
        for k in 0..classes_per_client {
            let class = class_order[(client * classes_per_client + k) % n_classes];
            holders[class].push(client);
        }
    }

    let mut assignments = vec![Vec::new(); num_clients];
    for (class, members) in holders.iter().enumerate() {
        let mut samples = by_class[class].clone();
        samples.shuffle(&mut rng);
        let draws: Vec<f64> = members.iter().map(|_| rng.random_range(0.4..0.6)).collect();
        let total_draw: f64 = draws.iter().sum();
        let n = samples.len();
        let mut counts: Vec<usize> = draws
            .iter()
            .map(|s| ((n as f64) * s / total_draw).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        let largest = (0..draws.len())
            .max_by(|&a, &b| draws[a].total_cmp(&draws[b]).then(b.cmp(&a)))
            .expect("every class has a holder");
        counts[largest] += n - assigned;

        let mut cursor = 0;
        for (&client, &count) in members.iter().zip(&counts) {
            assignments[client].extend_from_slice(&samples[cursor..cursor + count]);
            cursor += count;
        }
    }
    Partition::from_assignments(dataset, assignments)
}

/// `1 - sum_j c_j / (N * C)` where `c_j` is the number of clients holding
/// class `j` when more than one does, and 0 when exactly one does.
pub fn distributional_heterogeneity(p: &Partition) -> Result<f64> {
    let n = p.num_classes();
    let c = p.num_clients();
    if n == 0 || c == 0 {
        return Err(Error::Contract("empty partition".into()));
    }
    let mut total = 0usize;
    for (j, holders) in p.holders_per_class().into_iter().enumerate() {
        match holders {
            0 => return Err(Error::Contract(format!("class {j} is held by no client"))),
            1 => {}
            k => total += k,
        }
    }
    Ok(1.0 - total as f64 / (n * c) as f64)
}

/// Fraction of each class's samples held by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding(pub Vec<f64>);

impl ClassEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn class_embedding(p: &Partition, client: usize) -> Result<ClassEmbedding> {
    if client >= p.num_clients() {
        return Err(Error::Contract(format!(
            "client {client} out of range ({} clients)",
            p.num_clients()
        )));
    }
    let totals = p.class_totals();
    Ok(ClassEmbedding(
        p.class_count_matrix[client]
            .iter()
            .zip(&totals)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
    ))
}

/// Index sets of a stratified split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits each class independently, sending `round(fraction * n_c)` samples
/// (kept within `[1, n_c - 1]`) to the training side.
pub fn train_test_split(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5917));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} samples; cannot split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
