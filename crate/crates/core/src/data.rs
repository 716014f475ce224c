//! Synthetic datasets and client partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::model::ParamVector;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    Regression,
    Classification { classes: usize },
}

/// Row-major feature matrix plus targets. Class labels are stored as
/// integer-valued `f64` so both task kinds share one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    targets: Vec<f64>,
    kind: DataKind,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, targets: Vec<f64>, kind: DataKind) -> Result<Self> {
        if dim == 0 {
            return Err(SimError::param("feature dimension must be positive"));
        }
        if features.len() != dim * targets.len() {
            return Err(SimError::Dimension {
                expected: dim * targets.len(),
                got: features.len(),
            });
        }
        if let DataKind::Classification { classes } = kind {
            if classes < 2 {
                return Err(SimError::param("classification needs at least 2 classes"));
            }
            if let Some(bad) = targets
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y as usize >= classes)
            {
                return Err(SimError::param(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self {
            features,
            dim,
            targets,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn classes(&self) -> Option<usize> {
        match self.kind {
            DataKind::Classification { classes } => Some(classes),
            DataKind::Regression => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.targets[i] as usize
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn targets_mut(&mut self) -> &mut [f64] {
        &mut self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Dataset {
            features,
            dim: self.dim,
            targets,
            kind: self.kind,
        }
    }

    /// Append all rows of `other`.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim || other.kind != self.kind {
            return Err(SimError::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.features.extend_from_slice(&other.features);
        self.targets.extend_from_slice(&other.targets);
        Ok(())
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// CSV with header `x0,...,x{d-1},y`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = (0..self.dim).map(|k| format!("x{k}")).chain(["y".to_string()]);
        w.write_record(header).expect("in-memory write");
        for i in 0..self.len() {
            let row = self.row(i).iter().chain([&self.targets[i]]).map(|v| v.to_string());
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("numbers are ascii")
    }

    pub fn from_csv(text: &str, kind: DataKind) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let cols = reader.headers().map_err(|e| SimError::Parse(e.to_string()))?.len();
        if cols < 2 {
            return Err(SimError::Parse("dataset csv needs at least one feature column".into()));
        }
        let dim = cols - 1;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Parse(format!("row {}: {e}", row + 1)))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SimError::Parse(format!("row {}: {e}", row + 1)))?;
            features.extend_from_slice(&vals[..dim]);
            targets.push(vals[dim]);
        }
        Dataset::new(features, dim, targets, kind)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, kind: DataKind) -> Result<Self> {
        Dataset::from_csv(&std::fs::read_to_string(path)?, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSpec {
    pub examples: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub weight_std: f64,
    pub train_fraction: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            examples: 10_000,
            dim: 100,
            noise_std: 1.0,
            weight_std: 5.0,
            train_fraction: 0.8,
        }
    }
}

/// Generated regression task together with the parameter that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticRegression {
    pub train: Dataset,
    pub test: Dataset,
    pub true_weights: ParamVector,
}

/// `y = <x, w*> + eps` with standard normal `x`, `eps ~ N(0, noise_std^2)`
/// and `w* ~ N(0, weight_std^2)`.
pub fn gen_synthetic_regression(spec: &RegressionSpec, seed: u64) -> Result<SyntheticRegression> {
    if spec.examples < 2 || spec.dim == 0 {
        return Err(SimError::param("regression needs >= 2 examples and dim >= 1"));
    }
    if !(spec.noise_std >= 0.0 && spec.weight_std >= 0.0) {
        return Err(SimError::param("standard deviations must be non-negative"));
    }
    let n_train = split_point(spec.examples, spec.train_fraction)?;
    let mut rng = substream(seed, "data/regression", &[]);
    let w_star: Vec<f64> = (0..spec.dim)
        .map(|_| spec.weight_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(spec.examples * spec.dim);
    let mut targets = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let start = features.len();
        features.extend((0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &features[start..];
        let clean: f64 = x.iter().zip(&w_star).map(|(a, b)| a * b).sum();
        let noise = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
        targets.push(clean + noise);
    }
    let all = Dataset::new(features, spec.dim, targets, DataKind::Regression)?;
    let train = all.subset(&(0..n_train).collect::<Vec<_>>());
    let test = all.subset(&(n_train..spec.examples).collect::<Vec<_>>());
    Ok(SyntheticRegression {
        train,
        test,
        true_weights: ParamVector::new(w_star),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationSpec {
    pub examples: usize,
    pub dim: usize,
    pub classes: usize,
    pub cluster_sep: f64,
    pub train_fraction: f64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            examples: 10_000,
            dim: 20,
            classes: 10,
            cluster_sep: 4.0,
            train_fraction: 0.8,
        }
    }
}

/// Unit-covariance Gaussian clusters. Class `h` is centred at
/// `(sep / sqrt 2) * e_{dim - classes + h}`, so any two centres are `sep`
/// apart and the leading `dim - classes` features are pure noise (room for
/// a backdoor trigger).
/// Labels are assigned round-robin before shuffling, so classes are
/// balanced to within one example.
pub fn gen_synthetic_classification(spec: &ClassificationSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(SimError::param("need at least 2 classes"));
    }
    if spec.dim < spec.classes {
        return Err(SimError::param(format!(
            "dim {} too small to place {} clusters on distinct axes",
            spec.dim, spec.classes
        )));
    }
    if spec.examples < 2 {
        return Err(SimError::param("need at least 2 examples"));
    }
    let n_train = split_point(spec.examples, spec.train_fraction)?;
    let mut rng = substream(seed, "data/classification", &[]);
    let offset = spec.cluster_sep / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..spec.examples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let first_axis = spec.dim - spec.classes;
    let mut features = Vec::with_capacity(spec.examples * spec.dim);
    for &h in &labels {
        for k in 0..spec.dim {
            let centre = if k == first_axis + h { offset } else { 0.0 };
            features.push(centre + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let targets = labels.iter().map(|&h| h as f64).collect();
    let all = Dataset::new(
        features,
        spec.dim,
        targets,
        DataKind::Classification {
            classes: spec.classes,
        },
    )?;
    let train = all.subset(&(0..n_train).collect::<Vec<_>>());
    let test = all.subset(&(n_train..spec.examples).collect::<Vec<_>>());
    Ok((train, test))
}

fn split_point(n: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SimError::param("train_fraction must be in (0, 1)"));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(SimError::param("train/test split leaves an empty side"));
    }
    Ok(n_train)
}

/// Per-client index lists into a training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Checks disjointness, coverage of `0..n_examples` and non-empty shards.
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let mut seen = vec![false; n_examples];
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(SimError::param(format!("client {c} received no examples")));
            }
            for &i in shard {
                if i >= n_examples || seen[i] {
                    return Err(SimError::param(format!("example {i} out of range or duplicated")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SimError::param("partition does not cover the training set"));
        }
        Ok(())
    }
}

/// Random near-equal shards (sizes differ by at most one).
pub fn partition_iid(train: &Dataset, clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 || clients > train.len() {
        return Err(SimError::param(format!(
            "cannot split {} examples over {clients} clients",
            train.len()
        )));
    }
    let mut idx = train.all_indices();
    idx.shuffle(&mut substream(seed, "partition/iid", &[]));
    let base = idx.len() / clients;
    let extra = idx.len() % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        shards.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(PartitionPlan { shards })
}

/// Group-based label skew: clients are split into `z` random groups; an
/// example with label `h` goes to group `h` with probability `p` and to a
/// uniformly chosen other group otherwise, then to a uniformly chosen
/// client inside that group. With `clients % z != 0` the lower-numbered
/// groups take the extra clients.
pub fn partition_noniid_grouped(train: &Dataset, clients: usize, p: f64, seed: u64) -> Result<PartitionPlan> {
    let z = train
        .classes()
        .ok_or_else(|| SimError::Kind("grouped Non-IID partition needs a classification dataset".into()))?;
    if clients < z {
        return Err(SimError::param(format!("need at least {z} clients, got {clients}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(SimError::param("p must be in [0, 1]"));
    }
    let mut rng = substream(seed, "partition/grouped", &[]);
    let mut order: Vec<usize> = (0..clients).collect();
    order.shuffle(&mut rng);
    let base = clients / z;
    let extra = clients % z;
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(z);
    let mut start = 0;
    for g in 0..z {
        let len = base + usize::from(g < extra);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    let mut shards = vec![Vec::new(); clients];
    for i in 0..train.len() {
        let h = train.label(i);
        let group = if rng.random::<f64>() < p {
            h
        } else {
            // uniform over the other z-1 groups
            let g = rng.random_range(0..z - 1);
            if g >= h {
                g + 1
            } else {
                g
            }
        };
        let members = &groups[group];
        let client = members[rng.random_range(0..members.len())];
        shards[client].push(i);
    }
    let plan = PartitionPlan { shards };
    plan.validate(train.len())?;
    Ok(plan)
}

/// Each client holds examples from exactly `classes_per_client` labels.
/// Client `c` owns labels `c*k, c*k+1, ..., c*k+k-1 (mod z)`; every label's
/// examples are dealt round-robin over its owners.
pub fn partition_noniid_slices(
    train: &Dataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let z = train
        .classes()
        .ok_or_else(|| SimError::Kind("label-slice partition needs a classification dataset".into()))?;
    if classes_per_client == 0 || classes_per_client > z {
        return Err(SimError::param(format!(
            "classes_per_client must be in 1..={z}"
        )));
    }
    if clients == 0 {
        return Err(SimError::param("need at least one client"));
    }
    let owned: Vec<BTreeSet<usize>> = (0..clients)
        .map(|c| {
            (0..classes_per_client)
                .map(|j| (c * classes_per_client + j) % z)
                .collect()
        })
        .collect();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); z];
    for (c, labels) in owned.iter().enumerate() {
        for &h in labels {
            owners[h].push(c);
        }
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); z];
    for i in 0..train.len() {
        by_label[train.label(i)].push(i);
    }
    let mut rng = substream(seed, "partition/slices", &[]);
    let mut shards = vec![Vec::new(); clients];
    for h in 0..z {
        if by_label[h].is_empty() {
            continue;
        }
        if owners[h].is_empty() {
            return Err(SimError::param(format!(
                "label {h} has no owner: {clients} clients x {classes_per_client} labels cannot cover {z} classes"
            )));
        }
        if by_label[h].len() < owners[h].len() {
            return Err(SimError::param(format!(
                "label {h} has {} examples for {} owners",
                by_label[h].len(),
                owners[h].len()
            )));
        }
        by_label[h].shuffle(&mut rng);
        for (k, &i) in by_label[h].iter().enumerate() {
            shards[owners[h][k % owners[h].len()]].push(i);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    let plan = PartitionPlan { shards };
    plan.validate(train.len())?;
    Ok(plan)
}

/// Draw `n` values from `N(mean, std^2)`.
pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("std is finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}
