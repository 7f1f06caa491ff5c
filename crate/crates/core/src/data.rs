//! Datasets, worker shards and mini-batch sampling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FflError, Result};
use crate::rng::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major `len × dim` features in `[0, 1]` with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FflError::invalid("dataset must hold at least one sample"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(FflError::Dimension(format!(
                "{} features for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(FflError::invalid(format!("label {bad} outside 0..{classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FflError::invalid("dataset features must be finite"));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New dataset made of the listed rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.classes)
    }

    /// The whole dataset as one batch, used for evaluation.
    pub fn as_batch(&self) -> MiniBatch {
        MiniBatch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            dim: self.dim,
        }
    }

    /// Shuffled split into `(train, test)` with `round(len · test_fraction)` test rows.
    pub fn split(&self, test_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(FflError::config("test_fraction", "must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(FflError::config(
                "test_fraction",
                format!("leaves an empty train or test set for {} samples", self.len()),
            ));
        }
        let (test, train) = order.split_at(n_test);
        Ok((self.select(train)?, self.select(test)?))
    }
}

/// Indices into a [`Dataset`] owned by one worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Every worker only sees samples from this many classes.
    ClassesPerWorker(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub workers: usize,
}

/// Gaussian blobs around `classes` random points of the unit sphere, then
/// min-max scaled (one affine map for all coordinates) into `[0, 1]`.
///
/// Samples are grouped by class: rows `c·per_class .. (c+1)·per_class` carry label `c`.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(FflError::config("synthetic_classes", "need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(FflError::config("synthetic_per_class", "must be at least 1"));
    }
    if dim == 0 {
        return Err(FflError::config("synthetic_dim", "must be at least 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FflError::config("synthetic_spread", "must be finite and non-negative"));
    }

    let mut centers = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|x| *x /= norm);
        centers.extend(c);
    }

    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = &centers[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            features.extend(center.iter().map(|&x| x + spread * rng.standard_normal()));
            labels.push(c);
        }
    }

    let (lo, hi) = features
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range > 0.0 {
        features.iter_mut().for_each(|x| *x = ((*x - lo) / range).clamp(0.0, 1.0));
    } else {
        features.iter_mut().for_each(|x| *x = 0.0);
    }

    Dataset::new(features, labels, dim, classes)
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FflError::Format {
            offset: offset as u64,
            message: format!("truncated header reading {what}: file has {} bytes", bytes.len()),
        })
}

/// Parse an IDX image file (magic 2051) into `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FflError::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let pixels = rows * cols;
    let expected = count * pixels;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(FflError::Format {
            offset: 16 + body.len() as u64,
            message: format!(
                "truncated pixel data: expected {expected} bytes, found {}",
                body.len()
            ),
        });
    }
    let data = body[..expected].iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((count, pixels, data))
}

/// Parse an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FflError::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(FflError::Format {
            offset: 8 + body.len() as u64,
            message: format!("truncated label data: expected {count} bytes, found {}", body.len()),
        });
    }
    Ok(body[..count].iter().map(|&y| usize::from(y)).collect())
}

/// Load an IDX image/label pair (the MNIST container format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, pixels, features) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(FflError::Format {
            offset: 4,
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, pixels, classes)
}

/// Split a dataset into disjoint, equally sized (±1) worker shards.
pub fn partition(ds: &Dataset, spec: &PartitionSpec, rng: &mut RngStream) -> Result<Vec<Shard>> {
    let m = spec.workers;
    if m == 0 {
        return Err(FflError::config("workers", "must be at least 1"));
    }
    if ds.len() < m {
        return Err(FflError::config(
            "workers",
            format!("{m} workers for only {} samples", ds.len()),
        ));
    }
    match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            rng.shuffle(&mut order);
            let base = ds.len() / m;
            let extra = ds.len() % m;
            let mut shards = Vec::with_capacity(m);
            let mut start = 0;
            for j in 0..m {
                let size = base + usize::from(j < extra);
                shards.push(Shard {
                    indices: order[start..start + size].to_vec(),
                });
                start += size;
            }
            Ok(shards)
        }
        PartitionMode::ClassesPerWorker(c) => partition_by_class(ds, c, m, rng),
    }
}

fn partition_by_class(ds: &Dataset, c: usize, m: usize, rng: &mut RngStream) -> Result<Vec<Shard>> {
    let classes = ds.classes();
    if c == 0 || c > classes {
        return Err(FflError::config(
            "classes_per_worker",
            format!("must lie in 1..={classes}, got {c}"),
        ));
    }
    if m * c < classes {
        return Err(FflError::config(
            "classes_per_worker",
            format!("{m} workers × {c} classes cannot cover all {classes} classes"),
        ));
    }

    let mut class_order: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut class_order);
    // Round-robin over the shuffled class list: worker j holds c consecutive entries.
    let assigned: Vec<Vec<usize>> = (0..m)
        .map(|j| (0..c).map(|t| class_order[(j * c + t) % classes]).collect())
        .collect();

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        rng.shuffle(pool);
    }

    let quota = ds.len() / m;
    let mut shards: Vec<Vec<usize>> = vec![Vec::with_capacity(quota); m];
    let mut drawn = vec![vec![0usize; c]; m];
    'fill: for _ in 0..quota {
        for (j, own) in assigned.iter().enumerate() {
            // Least-drawn of the worker's classes first, then the fullest pool, then list order.
            let best = (0..c)
                .filter(|&t| !pools[own[t]].is_empty())
                .min_by(|&a, &b| {
                    drawn[j][a]
                        .cmp(&drawn[j][b])
                        .then(pools[own[b]].len().cmp(&pools[own[a]].len()))
                        .then(a.cmp(&b))
                });
            match best {
                Some(t) => {
                    drawn[j][t] += 1;
                    shards[j].push(pools[own[t]].pop().expect("non-empty pool"));
                }
                None => break 'fill,
            }
        }
    }
    let size = shards.iter().map(Vec::len).min().unwrap_or(0);
    if size == 0 {
        return Err(FflError::config(
            "classes_per_worker",
            "class assignment leaves a worker without samples",
        ));
    }
    Ok(shards
        .into_iter()
        .map(|mut s| {
            s.truncate(size);
            Shard { indices: s }
        })
        .collect())
}

/// `b` uniform draws with replacement from the shard.
pub fn sample_minibatch(shard: &Shard, ds: &Dataset, b: usize, rng: &mut RngStream) -> Result<MiniBatch> {
    if shard.is_empty() {
        return Err(FflError::invalid("cannot sample from an empty shard"));
    }
    if b == 0 {
        return Err(FflError::invalid("batch size must be at least 1"));
    }
    let mut features = Vec::with_capacity(b * ds.dim());
    let mut labels = Vec::with_capacity(b);
    for _ in 0..b {
        let i = shard.indices[rng.index(shard.len())];
        features.extend_from_slice(ds.row(i));
        labels.push(ds.labels()[i]);
    }
    Ok(MiniBatch {
        features,
        labels,
        dim: ds.dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend((images.len() as u32).to_be_bytes());
        out.extend(rows.to_be_bytes());
        out.extend(cols.to_be_bytes());
        for img in images {
            out.extend(img);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(IDX_LABELS_MAGIC.to_be_bytes());
        out.extend((labels.len() as u32).to_be_bytes());
        out.extend(labels);
        out
    }

    #[test]
    fn synthetic_counts_per_class() {
        let mut rng = RngStream::from_seed(1);
        let ds = gen_synthetic(3, 100, 5, 0.2, &mut rng).unwrap();
        assert_eq!(ds.len(), 300);
        let mut hist = [0usize; 3];
        ds.labels().iter().for_each(|&y| hist[y] += 1);
        assert_eq!(hist, [100, 100, 100]);
        assert!(ds.features().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let mut rng = RngStream::from_seed(2);
        let ds = gen_synthetic(4, 10, 6, 0.0, &mut rng).unwrap();
        for c in 0..4 {
            let first = ds.row(c * 10).to_vec();
            for i in 0..10 {
                assert_eq!(ds.row(c * 10 + i), first.as_slice());
            }
        }
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let zero = vec![0u8; 784];
        let mut ramp = vec![0u8; 784];
        ramp[0] = 255;
        ramp[1] = 51;
        std::fs::write(&img_path, idx_images(&[zero, ramp], 28, 28)).unwrap();
        std::fs::write(&lbl_path, idx_labels(&[7, 2])).unwrap();

        let ds = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 784));
        assert_eq!(ds.labels(), &[7, 2]);
        assert!(ds.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(ds.row(1)[0], 1.0);
        assert!((ds.row(1)[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn truncated_idx_reports_lengths() {
        let mut bytes = idx_images(&[vec![0u8; 784], vec![0u8; 784]], 28, 28);
        bytes.truncate(16 + 1000);
        let err = parse_idx_images(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, FflError::Format { offset: 1016, .. }), "{msg}");
        assert!(msg.contains("1568") && msg.contains("1000"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = idx_labels(&[1, 2]);
        bytes[3] = 0x03;
        let err = parse_idx_labels(&bytes).unwrap_err();
        assert!(matches!(err, FflError::Format { offset: 0, .. }));
        assert!(parse_idx_images(&[0, 0]).is_err());
    }

    fn toy_dataset(n: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = (0..n).map(|i| i as f64 / n as f64).collect();
        Dataset::new(features, labels, 1, classes).unwrap()
    }

    #[test]
    fn iid_partition_covers_everything() {
        let ds = toy_dataset(100, 4);
        let spec = PartitionSpec { mode: PartitionMode::Iid, workers: 4 };
        let shards = partition(&ds, &spec, &mut RngStream::from_seed(3)).unwrap();
        assert!(shards.iter().all(|s| s.len() == 25));
        let union: BTreeSet<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        assert_eq!(union.len(), 100);
    }

    #[test]
    fn iid_partition_balances_remainders() {
        let ds = toy_dataset(103, 4);
        let spec = PartitionSpec { mode: PartitionMode::Iid, workers: 4 };
        let shards = partition(&ds, &spec, &mut RngStream::from_seed(3)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Shard::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn one_class_per_worker_gives_singleton_label_sets() {
        let ds = toy_dataset(400, 4);
        let spec = PartitionSpec { mode: PartitionMode::ClassesPerWorker(1), workers: 4 };
        let shards = partition(&ds, &spec, &mut RngStream::from_seed(4)).unwrap();
        let mut seen = BTreeSet::new();
        for s in &shards {
            let labels: BTreeSet<usize> = s.indices.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(labels.len(), 1);
            seen.extend(labels);
            assert_eq!(s.len(), 100);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn all_classes_per_worker_matches_iid_coverage() {
        let ds = toy_dataset(400, 4);
        let spec = PartitionSpec { mode: PartitionMode::ClassesPerWorker(4), workers: 4 };
        let shards = partition(&ds, &spec, &mut RngStream::from_seed(5)).unwrap();
        for s in &shards {
            let labels: BTreeSet<usize> = s.indices.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(labels.len(), 4);
        }
        let total: usize = shards.iter().map(Shard::len).sum();
        assert_eq!(total, 400);
    }

    #[test]
    fn infeasible_class_assignment_is_a_config_error() {
        let ds = toy_dataset(100, 10);
        let spec = PartitionSpec { mode: PartitionMode::ClassesPerWorker(2), workers: 4 };
        assert!(partition(&ds, &spec, &mut RngStream::from_seed(6)).unwrap_err().is_config());
        let spec = PartitionSpec { mode: PartitionMode::ClassesPerWorker(11), workers: 4 };
        assert!(partition(&ds, &spec, &mut RngStream::from_seed(6)).unwrap_err().is_config());
    }

    #[test]
    fn minibatch_from_singleton_shard() {
        let ds = toy_dataset(10, 2);
        let shard = Shard { indices: vec![3] };
        let b = sample_minibatch(&shard, &ds, 1, &mut RngStream::from_seed(0)).unwrap();
        assert_eq!(b.labels, vec![ds.labels()[3]]);
        assert_eq!(b.row(0), ds.row(3));
    }

    #[test]
    fn minibatch_draws_are_uniform_with_replacement() {
        let ds = toy_dataset(10, 2);
        let shard = Shard { indices: vec![2, 5] };
        let n = 10_000;
        let b = sample_minibatch(&shard, &ds, n, &mut RngStream::from_seed(9)).unwrap();
        let hits = (0..n).filter(|&i| b.row(i) == ds.row(2)).count() as f64;
        let freq = hits / n as f64;
        let stderr = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * stderr, "freq {freq}");
    }

    #[test]
    fn minibatch_sequence_is_seeded() {
        let ds = toy_dataset(50, 5);
        let shard = Shard { indices: (0..50).collect() };
        let mut a = RngStream::from_seed(11);
        let mut b = RngStream::from_seed(11);
        for _ in 0..5 {
            assert_eq!(
                sample_minibatch(&shard, &ds, 8, &mut a).unwrap(),
                sample_minibatch(&shard, &ds, 8, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn empty_shard_is_rejected() {
        let ds = toy_dataset(10, 2);
        let err = sample_minibatch(&Shard { indices: vec![] }, &ds, 4, &mut RngStream::from_seed(0));
        assert!(matches!(err, Err(FflError::InvalidInput(_))));
    }
}
