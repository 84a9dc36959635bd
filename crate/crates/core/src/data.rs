//! Datasets, loaders, the synthetic softmax benchmark and client partitioners.

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SampleBatch;
use crate::numerics::{dot, DenseMatrix, RngSeed};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Features (`N x input_dim`) with dense class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Degenerate("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Consistency(format!("label {y} outside [0, {num_classes})")));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("dataset contains non-finite features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `indices`, in order, as a training batch.
    pub fn batch(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> SampleBatch {
        SampleBatch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    pub fn label_set(&self, indices: &[usize]) -> BTreeSet<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Labels mapped to `1` for `class` and `0` otherwise, order preserved.
pub fn binary_labels(labels: &[usize], class: usize) -> Vec<usize> {
    labels.iter().map(|&y| usize::from(y == class)).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path))
}

fn truncated(path: &Path) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX file"))
}

/// Parses an IDX image/label pair (big-endian, magic `0x803` / `0x801`).
/// Pixels are scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            ip.display()
        )));
    }
    let magic = be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            lp.display()
        )));
    }

    let n_images = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let n_labels = be_u32(&labels, 4, lp)? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!("{n_images} images but {n_labels} labels")));
    }
    let pixels = rows * cols;
    let body = images.get(16..16 + n_images * pixels).ok_or_else(|| truncated(ip))?;
    let label_bytes = labels.get(8..8 + n_labels).ok_or_else(|| truncated(lp))?;

    let features = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let name = ip
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(DenseMatrix::new(n_images, pixels, features)?, labels, num_classes, name)
}

/// Reads a headed CSV. Feature columns are standardized; labels are densified
/// to `0..n` in sorted order of their distinct values (numeric order when every
/// label parses as a number).
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers.iter().position(|h| h.trim() == label_column).ok_or_else(|| {
        Error::Format(format!(
            "{}: no label column `{label_column}` in header",
            path.display()
        ))
    })?;
    let width = headers.len() - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (col, cell) in rec.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {}, column `{}`: `{cell}` is not numeric",
                    path.display(),
                    row + 1,
                    &headers[col]
                ))
            })?;
            features.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let n = raw_labels.len();
    let mut features = DenseMatrix::new(n, width, features)?;
    standardize_columns(&mut features);

    let mut distinct: Vec<&String> = raw_labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut order: Vec<usize> = (0..distinct.len()).collect();
        order.sort_by(|&a, &b| nums[a].total_cmp(&nums[b]));
        distinct = order.into_iter().map(|i| distinct[i]).collect();
    }
    let labels = raw_labels
        .iter()
        .map(|l| distinct.iter().position(|d| *d == l).expect("label was collected"))
        .collect();
    let num_classes = distinct.len().max(2);
    let name = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(features, labels, num_classes, name)
}

/// Zero mean and unit variance per column; near-constant columns become zero.
fn standardize_columns(m: &mut DenseMatrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mean = (0..rows).map(|i| m.get(i, j)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (m.get(i, j) - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt().max(1e-12);
        for i in 0..rows {
            let v = (m.get(i, j) - mean) / sd;
            m.set(i, j, v);
        }
    }
}

/// Ground-truth softmax model for the synthetic benchmark.
///
/// True weights have i.i.d. `N(0, (3^2)/d)` entries, features are standard
/// normal and labels are drawn from `softmax(margin * W x)`. Each draw is
/// accepted only while its class quota is open, so class sizes differ by at
/// most one.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub true_weights: DenseMatrix,
    pub margin: f64,
    pub seed: u64,
}

const SYNTH_WEIGHT_SCALE: f64 = 3.0;

impl SyntheticTask {
    pub fn new(input_dim: usize, num_classes: usize, margin: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::config("data.synth", "needs input_dim >= 1 and num_classes >= 2"));
        }
        if !(margin > 0.0) {
            return Err(Error::config("data.synth.margin", "must be positive"));
        }
        let mut rng = RngSeed::new(seed, crate::numerics::streams::SYNTH_TRUTH).stream();
        let scale = SYNTH_WEIGHT_SCALE / (input_dim as f64).sqrt();
        let w = (0..num_classes * input_dim).map(|_| scale * rng.normal()).collect();
        Ok(Self {
            true_weights: DenseMatrix::new(num_classes, input_dim, w)?,
            margin,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.true_weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.true_weights.cols()
    }

    /// Class of `x` under the noiseless model.
    pub fn argmax_label(&self, x: &[f64]) -> usize {
        let logits: Vec<f64> = (0..self.num_classes())
            .map(|m| dot(self.true_weights.row(m), x))
            .collect();
        crate::models::argmax(&logits)
    }

    /// Draws `n` class-balanced samples from stream `stream_id`.
    pub fn sample(&self, n: usize, stream_id: u64, name: &str) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::config("data.synth.n_train", "must be at least 1"));
        }
        let (classes, din) = (self.num_classes(), self.input_dim());
        let mut quota: Vec<usize> = (0..classes)
            .map(|c| n / classes + usize::from(c < n % classes))
            .collect();
        let mut rng = RngSeed::new(self.seed, stream_id).stream();
        let mut features = Vec::with_capacity(n * din);
        let mut labels = Vec::with_capacity(n);
        let mut x = vec![0.0; din];
        let mut probs = vec![0.0; classes];
        let budget = 10_000 * n;
        for _ in 0..budget {
            if labels.len() == n {
                break;
            }
            x.iter_mut().for_each(|v| *v = rng.normal());
            let y = if self.margin.is_infinite() {
                self.argmax_label(&x)
            } else {
                for (m, p) in probs.iter_mut().enumerate() {
                    *p = self.margin * dot(self.true_weights.row(m), &x);
                }
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                probs.iter_mut().for_each(|p| *p = (*p - max).exp());
                rng.categorical(&probs)
            };
            if quota[y] > 0 {
                quota[y] -= 1;
                features.extend_from_slice(&x);
                labels.push(y);
            }
        }
        if labels.len() < n {
            return Err(Error::Degenerate(
                "synthetic generator could not fill every class quota".into(),
            ));
        }
        Dataset::new(DenseMatrix::new(n, din, features)?, labels, classes, name)
    }
}

/// `n` samples of the synthetic benchmark drawn from the data stream of `seed`.
pub fn synth_logistic(n: usize, input_dim: usize, num_classes: usize, margin: f64, seed: u64) -> Result<Dataset> {
    SyntheticTask::new(input_dim, num_classes, margin, seed)?.sample(n, crate::numerics::streams::DATA, "synth-train")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    NoniidL { l: usize },
}

/// Disjoint, covering assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub assignment: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    /// Checks disjointness, coverage of `0..n` and nonempty clients.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.assignment.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Consistency(format!("client {k} holds no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::Consistency(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Consistency(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Consistency(format!("index {i} unassigned")));
        }
        Ok(())
    }
}

/// Shuffles all indices and deals them round-robin; sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed: u64) -> Result<PartitionPlan> {
    let n = dataset.len();
    if clients == 0 || clients > n {
        return Err(Error::config(
            "federation.clients",
            format!("need 1 <= clients <= samples ({n}), got {clients}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngSeed::new(seed, crate::numerics::streams::PARTITION)
        .stream()
        .shuffle(&mut order);
    let mut assignment = vec![Vec::with_capacity(n / clients + 1); clients];
    for (pos, i) in order.into_iter().enumerate() {
        assignment[pos % clients].push(i);
    }
    assignment.iter_mut().for_each(|a| a.sort_unstable());
    Ok(PartitionPlan {
        scheme: PartitionScheme::Iid,
        assignment,
    })
}

/// Label-skewed split: every client receives `l` shards with distinct labels.
///
/// Each label group is shuffled and cut into `l * clients / num_classes`
/// near-equal shards. Clients are visited in random order and take one shard
/// from each of the `l` labels with the most shards left, ties broken at random.
/// Taking the fullest groups keeps the remaining counts within one of each
/// other, so `l` distinct labels are always available.
pub fn partition_noniid_l(dataset: &Dataset, clients: usize, l: usize, seed: u64) -> Result<PartitionPlan> {
    let n_classes = dataset.num_classes;
    if clients == 0 {
        return Err(Error::config("federation.clients", "must be at least 1"));
    }
    if l == 0 || l > n_classes {
        return Err(Error::config(
            "partition.l",
            format!("must satisfy 1 <= l <= num_classes ({n_classes}), got {l}"),
        ));
    }
    if !(l * clients).is_multiple_of(n_classes) {
        return Err(Error::config(
            "partition.l",
            format!(
                "l * clients must be divisible by num_classes: {l} * {clients} = {} is not a multiple of {n_classes}",
                l * clients
            ),
        ));
    }
    let shards_per_label = l * clients / n_classes;
    let mut rng = RngSeed::new(seed, crate::numerics::streams::PARTITION).stream();

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        groups[y].push(i);
    }
    let mut shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_classes);
    for (label, mut group) in groups.into_iter().enumerate() {
        if group.len() < shards_per_label {
            return Err(Error::config(
                "partition.l",
                format!(
                    "label {label} has {} samples, too few for {shards_per_label} shards",
                    group.len()
                ),
            ));
        }
        rng.shuffle(&mut group);
        let (base, extra) = (group.len() / shards_per_label, group.len() % shards_per_label);
        let mut cut = Vec::with_capacity(shards_per_label);
        let mut start = 0;
        for s in 0..shards_per_label {
            let len = base + usize::from(s < extra);
            cut.push(group[start..start + len].to_vec());
            start += len;
        }
        // popped from the back
        cut.reverse();
        shards.push(cut);
    }

    let mut order: Vec<usize> = (0..clients).collect();
    rng.shuffle(&mut order);
    let mut assignment = vec![Vec::new(); clients];
    for k in order {
        // shuffle first so the stable sort breaks ties in random order
        let mut labels: Vec<usize> = (0..n_classes).filter(|&c| !shards[c].is_empty()).collect();
        rng.shuffle(&mut labels);
        labels.sort_by(|&a, &b| shards[b].len().cmp(&shards[a].len()));
        if labels.len() < l {
            return Err(Error::Consistency("shard matching ran out of distinct labels".into()));
        }
        for &c in &labels[..l] {
            let shard = shards[c].pop().expect("label has shards left");
            assignment[k].extend(shard);
        }
        assignment[k].sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::NoniidL { l },
        assignment,
    })
}

/// Indices of the globally shared subset: `round(beta * mean_client_size)`
/// samples drawn uniformly without replacement from the whole training set.
pub fn share_subset(dataset: &Dataset, beta: f64, mean_client_size: f64, seed: u64) -> Result<Vec<usize>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::config("sharing.beta", format!("must lie in (0, 1], got {beta}")));
    }
    let size = (beta * mean_client_size).round() as usize;
    if size == 0 {
        return Err(Error::config(
            "sharing.beta",
            format!("beta = {beta} shares no samples at mean client size {mean_client_size}"),
        ));
    }
    let mut rng = RngSeed::new(seed, crate::numerics::streams::SHARING).stream();
    let mut idx = rng.sample_indices(dataset.len(), size.min(dataset.len()));
    idx.sort_unstable();
    Ok(idx)
}
