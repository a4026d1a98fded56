//! Desk-scale classification datasets and Dirichlet client partitioning.
//!
//! Synthetic data comes in two modes matching the two model families:
//! class-conditional Gaussian clusters (feature vectors for the MLP) and
//! blob images (one blob position per class, for the CNN). Heterogeneity
//! across clients is synthesized by allocating each class's samples with
//! Dirichlet-distributed proportions; smaller alpha means more skew.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, domain};
use crate::tensor::Tensor;

/// A labelled set: `inputs` is (N, feature shape...), `labels[i] < num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("dataset is empty".to_string()));
        }
        if self.inputs.shape().is_empty() || self.inputs.shape()[0] != self.len() {
            return Err(Error::contract("inputs first dimension must match label count".to_string()));
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::contract("label out of range".to_string()));
        }
        Ok(())
    }

    /// Per-sample length (product of the non-batch dimensions).
    pub fn sample_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// Copy the rows at `indices` into a new dataset (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let sample_len = self.sample_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("index {} out of range", i)));
            }
            data.extend_from_slice(&self.inputs.data()[i * sample_len..(i + 1) * sample_len]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::new(shape, data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Normalized label histogram.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut hist = vec![0.0; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1.0;
        }
        let n = self.len() as f64;
        for h in &mut hist {
            *h /= n;
        }
        hist
    }
}

/// Input geometry for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticShape {
    Features { dim: usize },
    Image { channels: usize, size: usize },
}

/// Generator settings for a synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub shape: SyntheticShape,
    /// Per-element Gaussian noise around the class mean.
    pub noise_std: f64,
    /// Scale of the class means (cluster separation / blob amplitude).
    pub class_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("data.num_classes", "must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("data.samples_per_class", "must be positive"));
        }
        if self.test_samples_per_class == 0 {
            return Err(Error::config("data.test_samples_per_class", "must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("data.noise_std", "must be nonnegative"));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::config("data.class_separation", "must be positive"));
        }
        match self.shape {
            SyntheticShape::Features { dim } => {
                if dim == 0 {
                    return Err(Error::config("data.shape.dim", "must be positive"));
                }
            }
            SyntheticShape::Image { channels, size } => {
                if channels == 0 || size == 0 {
                    return Err(Error::config("data.shape", "channels and size must be positive"));
                }
            }
        }
        Ok(())
    }

    fn sample_shape(&self) -> Vec<usize> {
        match self.shape {
            SyntheticShape::Features { dim } => vec![dim],
            SyntheticShape::Image { channels, size } => vec![channels, size, size],
        }
    }
}

/// Class mean vectors/images, deterministic in the generator seed.
fn class_means(spec: &SyntheticSpec, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    let sample_len: usize = spec.sample_shape().iter().product();
    match spec.shape {
        SyntheticShape::Features { .. } => (0..spec.num_classes)
            .map(|_| {
                (0..sample_len)
                    .map(|_| spec.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect(),
        SyntheticShape::Image { channels, size } => {
            // One blob per class, centered on a ring around the image middle.
            let radius = size as f64 / 3.0;
            let sigma = (size as f64 / 6.0).max(0.75);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (0..spec.num_classes)
                .map(|c| {
                    let angle = phase + std::f64::consts::TAU * c as f64 / spec.num_classes as f64;
                    let cy = size as f64 / 2.0 + radius * angle.sin();
                    let cx = size as f64 / 2.0 + radius * angle.cos();
                    let mut mean = vec![0.0; sample_len];
                    for ch in 0..channels {
                        for r in 0..size {
                            for q in 0..size {
                                let d2 = (r as f64 - cy).powi(2) + (q as f64 - cx).powi(2);
                                mean[(ch * size + r) * size + q] =
                                    spec.class_separation * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                    mean
                })
                .collect()
        }
    }
}

fn sample_around(
    means: &[Vec<f64>],
    per_class: usize,
    noise_std: f64,
    num_classes: usize,
    sample_shape: &[usize],
    rng: &mut impl rand::Rng,
) -> Dataset {
    let sample_len: usize = sample_shape.iter().product();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * sample_len);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                data.push(m + noise_std * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Dataset {
        inputs: Tensor::new(shape, data).expect("generated data fills shape"),
        labels,
        num_classes,
    }
}

/// Generate a (train, test) pair from the same class means.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, domain::DATA_SYNTH, &[]);
    let means = class_means(spec, &mut rng);
    let shape = spec.sample_shape();
    let train = sample_around(
        &means,
        spec.samples_per_class,
        spec.noise_std,
        spec.num_classes,
        &shape,
        &mut rng,
    );
    let test = sample_around(
        &means,
        spec.test_samples_per_class,
        spec.noise_std,
        spec.num_classes,
        &shape,
        &mut rng,
    );
    Ok((train, test))
}

/// Dirichlet allocation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("partition.alpha", "must be positive"));
        }
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        Ok(())
    }
}

/// Disjoint, exhaustive per-client index lists into the parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Check disjointness and exhaustiveness against a dataset of size `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let mut count = 0usize;
        for a in &self.assignments {
            for &i in a {
                if i >= n || seen[i] {
                    return Err(Error::contract("partition is not a set partition".to_string()));
                }
                seen[i] = true;
                count += 1;
            }
        }
        if count != n {
            return Err(Error::contract("partition does not cover the dataset".to_string()));
        }
        Ok(())
    }
}

const PARTITION_ATTEMPTS: u64 = 100;

fn dirichlet_proportions(alpha: f64, k: usize, rng: &mut impl rand::Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return None;
    }
    Some(draws.iter().map(|d| d / sum).collect())
}

/// Allocate each class's samples across clients with Dir(alpha) proportions.
/// Resamples with an advanced seed (bounded retries) until every client has
/// at least `min_samples_per_client` samples.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    ds.validate()?;
    spec.validate()?;
    let k = spec.num_clients;
    if spec.min_samples_per_client * k > ds.len() {
        return Err(Error::config(
            "partition.min_samples_per_client",
            format!(
                "{} clients x {} min samples exceeds dataset size {}",
                k,
                spec.min_samples_per_client,
                ds.len()
            ),
        ));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = derive_rng(spec.seed, domain::PARTITION, &[attempt]);
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut ok = true;
        for idxs in &by_class {
            if idxs.is_empty() {
                continue;
            }
            let mut idxs = idxs.clone();
            idxs.shuffle(&mut rng);
            let Some(props) = dirichlet_proportions(spec.alpha, k, &mut rng) else {
                ok = false;
                break;
            };
            let n = idxs.len();
            let mut cum = 0.0;
            let mut start = 0usize;
            for (client, &p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == k {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                assignments[client].extend_from_slice(&idxs[start..end]);
                start = end;
            }
        }
        if ok && assignments.iter().all(|a| a.len() >= spec.min_samples_per_client) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(Partition { assignments });
        }
    }
    Err(Error::PartitionInfeasible(format!(
        "could not give every client {} samples within {} attempts (alpha={}, clients={})",
        spec.min_samples_per_client, PARTITION_ATTEMPTS, spec.alpha, k
    )))
}

/// Mean total-variation distance between client label distributions and the
/// global label distribution; 0 iff every client matches the global mix.
pub fn heterogeneity_stat(part: &Partition, ds: &Dataset) -> f64 {
    let global = ds.label_distribution();
    let mut total = 0.0;
    let mut clients = 0usize;
    for a in &part.assignments {
        if a.is_empty() {
            continue;
        }
        let mut hist = vec![0.0; ds.num_classes];
        for &i in a {
            hist[ds.labels[i]] += 1.0;
        }
        let n = a.len() as f64;
        let tv: f64 = hist
            .iter()
            .zip(&global)
            .map(|(h, g)| (h / n - g).abs())
            .sum::<f64>()
            / 2.0;
        total += tv;
        clients += 1;
    }
    if clients == 0 {
        0.0
    } else {
        total / clients as f64
    }
}

/// Load a tabular dataset from CSV with header `label,f0,f1,...`.
/// Rows are kept in file order.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("label") {
        return Err(Error::contract(format!(
            "{}: first CSV column must be `label`",
            path.display()
        )));
    }
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::contract(format!("{}: no feature columns", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != dim + 1 {
            return Err(Error::contract(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row + 2,
                record.len(),
                dim + 1
            )));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::contract(format!("{}: row {}: bad label {:?}", path.display(), row + 2, &record[0])))?;
        labels.push(label);
        for f in record.iter().skip(1) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("{}: row {}: bad feature {:?}", path.display(), row + 2, f)))?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::contract(format!("{}: no data rows", path.display())));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset {
        inputs: Tensor::new(vec![labels.len(), dim], data)?,
        labels,
        num_classes,
    })
}
