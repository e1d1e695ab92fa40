//! Datasets and client partitioning.
//!
//! The non-iid partitioner assigns each client an exclusive block of
//! `|M| / K` majority classes. For every class, each non-owning client
//! receives `floor(n_c · s / 100)` samples and the owner receives the rest,
//! so the owner's share is `(100 − (K−1)·s)%` up to integer rounding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;

/// Labelled samples with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    batch: Batch,
    class_count: usize,
    class_indices: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let batch = Batch::new(inputs, labels)?;
        batch.validate(class_count, 0.0, 1.0)?;
        let mut class_indices = vec![Vec::new(); class_count];
        for (i, &y) in batch.labels.iter().enumerate() {
            class_indices[y].push(i);
        }
        if let Some(c) = class_indices.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("class {c} has no samples")));
        }
        Ok(Self {
            batch,
            class_count,
            class_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.batch.inputs.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Matrix {
        &self.batch.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.batch.labels
    }

    pub fn as_batch(&self) -> &Batch {
        &self.batch
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_indices[class]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        self.batch.select(indices)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub input_dim: usize,
    /// Distance scale between class centers.
    pub separation: f64,
    /// Standard deviation of each blob.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            per_class: 50,
            input_dim: 10,
            separation: 0.5,
            noise: 0.15,
            seed: 0,
        }
    }
}

/// Unit-norm direction for each class: centered simplex vertices when the
/// input space is wide enough, otherwise points on a circle in the first
/// two coordinates.
fn class_directions(class_count: usize, input_dim: usize) -> Vec<Vec<f64>> {
    (0..class_count)
        .map(|c| {
            let mut v = vec![0.0; input_dim];
            if input_dim >= class_count {
                let k = class_count as f64;
                for (j, vj) in v.iter_mut().enumerate().take(class_count) {
                    *vj = if j == c { 1.0 - 1.0 / k } else { -1.0 / k };
                }
            } else if input_dim == 1 {
                v[0] = 2.0 * c as f64 / (class_count - 1) as f64 - 1.0;
            } else {
                let angle = std::f64::consts::TAU * c as f64 / class_count as f64;
                v[0] = angle.cos();
                v[1] = angle.sin();
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect()
}

/// Gaussian blobs around `0.5 + separation · direction_c`, clipped to `[0, 1]`.
///
/// Class centers depend only on `(class_count, input_dim, separation)`, so two
/// datasets that differ only in `seed` are draws from the same distribution
/// (useful for train/test splits).
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut problems = Vec::new();
    if spec.class_count < 2 {
        problems.push("class_count must be at least 2".to_string());
    }
    if spec.per_class == 0 {
        problems.push("per_class must be positive".to_string());
    }
    if spec.input_dim == 0 {
        problems.push("input_dim must be positive".to_string());
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        problems.push(format!(
            "separation must be non-negative, got {}",
            spec.separation
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        problems.push(format!("noise must be non-negative, got {}", spec.noise));
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let dirs = class_directions(spec.class_count, spec.input_dim);
    let normal = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.class_count * spec.per_class;
    let mut inputs = Matrix::zeros(n, spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, dir) in dirs.iter().enumerate() {
        for s in 0..spec.per_class {
            let row = inputs.row_mut(c * spec.per_class + s);
            for (x, d) in row.iter_mut().zip(dir) {
                let center = (0.5 + spec.separation * d).clamp(0.0, 1.0);
                *x = (center + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, spec.class_count)
}

/// Loads a CSV whose header names the feature columns followed by an integer
/// `label` column (the last column is used when none is named `label`).
///
/// Features must lie in `[0, 1]` unless `rescale` is set, in which case each
/// column is min-max scaled into that range.
pub fn load_csv(path: &Path, rescale: bool) -> Result<Dataset> {
    let (features, labels) = read_csv_table(path, true)?;
    let labels = labels.expect("labels requested");
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let inputs = finish_features(features, rescale)?;
    Dataset::new(inputs, labels, class_count)
}

/// Loads probe inputs from a CSV; a `label` column, if present, is ignored.
pub fn load_probe_csv(path: &Path, rescale: bool) -> Result<Matrix> {
    let (features, _) = read_csv_table(path, false)?;
    finish_features(features, rescale)
}

/// Feature rows and, when requested, labels.
type CsvTable = (Vec<Vec<f64>>, Option<Vec<usize>>);

fn read_csv_table(path: &Path, need_labels: bool) -> Result<CsvTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case("label"))
        .or(if need_labels {
            headers.len().checked_sub(1)
        } else {
            None
        });
    if need_labels && label_col.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{}: no label column",
            path.display()
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for (j, field) in record.iter().enumerate() {
            if Some(j) == label_col {
                if need_labels {
                    let y: usize = field.trim().parse().map_err(|_| {
                        Error::InvalidArgument(format!(
                            "{} row {}: label {field:?} is not a class index",
                            path.display(),
                            line + 1
                        ))
                    })?;
                    labels.push(y);
                }
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{} row {}: {field:?} is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            row.push(v);
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    }
    Ok((features, need_labels.then_some(labels)))
}

fn finish_features(rows: Vec<Vec<f64>>, rescale: bool) -> Result<Matrix> {
    let mut m = Matrix::from_rows(&rows)?;
    if !m.is_finite() {
        return Err(Error::NonFinite("csv features".into()));
    }
    if rescale {
        for j in 0..m.cols() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..m.rows() {
                lo = lo.min(m.get(i, j));
                hi = hi.max(m.get(i, j));
            }
            let span = hi - lo;
            for i in 0..m.rows() {
                let v = if span > 0.0 {
                    (m.get(i, j) - lo) / span
                } else {
                    0.0
                };
                m.set(i, j, v);
            }
        }
    } else if let Some(v) = m.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "feature value {v} outside [0, 1]; enable rescaling to min-max scale columns"
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Minority share per non-owning client, in percent.
    pub skew: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn majority_share(&self) -> f64 {
        100.0 - (self.clients as f64 - 1.0) * self.skew
    }

    pub fn problems(&self, class_count: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.clients == 0 {
            out.push("partition.clients must be at least 1".into());
            return out;
        }
        if !class_count.is_multiple_of(self.clients) {
            out.push(format!(
                "class count {class_count} is not divisible by {} clients",
                self.clients
            ));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            out.push(format!(
                "partition.skew must be non-negative, got {}",
                self.skew
            ));
        } else if self.majority_share() < self.skew {
            out.push(format!(
                "majority share {}% is below the minority share {}%",
                self.majority_share(),
                self.skew
            ));
        }
        out
    }
}

/// Client shards as index lists into a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    /// Majority classes per client; empty for iid partitions.
    pub majority_classes: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// `histogram[k][c]` = samples of class `c` held by client `k`.
    pub fn class_histogram(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|shard| {
                let mut h = vec![0; dataset.class_count()];
                for &i in shard {
                    h[dataset.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn shuffled_class(dataset: &Dataset, class: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = dataset.class_indices(class).to_vec();
    idx.shuffle(rng);
    idx
}

/// Minority count for a class of `n` samples at skew `s` percent.
fn minority_count(n: usize, skew: f64) -> usize {
    // The nudge keeps exact products such as 1000·0.1/100 from landing just
    // below an integer.
    ((n as f64 * skew / 100.0) + 1e-9).floor() as usize
}

pub fn partition_non_iid(dataset: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let problems = spec.problems(dataset.class_count());
    if !problems.is_empty() {
        return Err(Error::InvalidPartition(problems.join("; ")));
    }
    let k = spec.clients;
    let per_client = dataset.class_count() / k;
    let majority_classes: Vec<Vec<usize>> = (0..k)
        .map(|client| (client * per_client..(client + 1) * per_client).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shards = vec![Vec::new(); k];
    for class in 0..dataset.class_count() {
        let owner = class / per_client;
        let idx = shuffled_class(dataset, class, &mut rng);
        let minority = minority_count(idx.len(), spec.skew);
        let majority = idx.len() - (k - 1) * minority;
        let mut cursor = 0;
        for (client, shard) in shards.iter_mut().enumerate() {
            let take = if client == owner { majority } else { minority };
            shard.extend_from_slice(&idx[cursor..cursor + take]);
            cursor += take;
        }
        debug_assert_eq!(cursor, idx.len());
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(Partition {
        shards,
        majority_classes,
    })
}

/// Stratified split: each class is dealt round-robin, with the starting client
/// rotating per class so client totals stay balanced too.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidPartition("clients must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); clients];
    let mut start = 0;
    for class in 0..dataset.class_count() {
        let idx = shuffled_class(dataset, class, &mut rng);
        for (j, &i) in idx.iter().enumerate() {
            shards[(start + j) % clients].push(i);
        }
        start = (start + idx.len()) % clients;
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(Partition {
        shards,
        majority_classes: vec![Vec::new(); clients],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blobs(class_count: usize, per_class: usize) -> Dataset {
        make_synthetic(&SyntheticSpec {
            class_count,
            per_class,
            input_dim: 6,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn assert_partition_law(p: &Partition, n: usize) {
        let mut seen = vec![false; n];
        for shard in &p.shards {
            for &i in shard {
                assert!(!seen[i], "sample {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "some sample unassigned");
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let d = blobs(4, 10);
        assert_eq!(d.len(), 40);
        for c in 0..4 {
            assert_eq!(d.class_indices(c).len(), 10);
        }
        assert_eq!(d, blobs(4, 10));
        assert!(d
            .inputs()
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        let bad = SyntheticSpec {
            class_count: 1,
            per_class: 0,
            ..SyntheticSpec::default()
        };
        match make_synthetic(&bad) {
            Err(Error::InvalidConfig(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn narrow_input_space_still_separates_centers() {
        let d = make_synthetic(&SyntheticSpec {
            class_count: 5,
            per_class: 3,
            input_dim: 2,
            noise: 0.0,
            separation: 0.4,
            seed: 0,
        })
        .unwrap();
        let firsts: Vec<&[f64]> = (0..5)
            .map(|c| d.inputs().row(d.class_indices(c)[0]))
            .collect();
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(firsts[a], firsts[b]);
            }
        }
    }

    #[test]
    fn non_iid_paper_skews() {
        let d = blobs(10, 100);
        let cases = [
            (2, 1.0, 99.0),
            (5, 2.0, 92.0),
            (10, 2.0, 82.0),
            (10, 0.1, 99.1),
        ];
        for (k, s, majority) in cases {
            let spec = PartitionSpec {
                clients: k,
                skew: s,
                seed: 1,
            };
            assert!((spec.majority_share() - majority).abs() < 1e-9);
            let p = partition_non_iid(&d, &spec).unwrap();
            assert_partition_law(&p, d.len());
            let h = p.class_histogram(&d);
            for c in 0..10 {
                let owner = (0..k)
                    .find(|&j| p.majority_classes[j].contains(&c))
                    .unwrap();
                let minority = minority_count(100, s);
                for (j, row) in h.iter().enumerate() {
                    let want = if j == owner {
                        100 - (k - 1) * minority
                    } else {
                        minority
                    };
                    assert_eq!(row[c], want, "k={k} s={s} client {j} class {c}");
                }
            }
        }
    }

    #[test]
    fn non_iid_k5_s2_shares() {
        let d = blobs(5, 100);
        let p = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 5,
                skew: 2.0,
                seed: 9,
            },
        )
        .unwrap();
        let h = p.class_histogram(&d);
        assert_eq!(h[0], vec![92, 2, 2, 2, 2]);
        assert_eq!(h[3], vec![2, 2, 2, 92, 2]);
        assert!(p.shards.iter().all(|s| s.len() == 100));
    }

    #[test]
    fn rounding_remainder_goes_to_owner() {
        let d = blobs(2, 33);
        let p = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 2,
                skew: 10.0,
                seed: 0,
            },
        )
        .unwrap();
        let h = p.class_histogram(&d);
        assert_eq!(h[0], vec![30, 3]);
        assert_eq!(h[1], vec![3, 30]);
    }

    #[test]
    fn single_client_owns_everything() {
        let d = blobs(3, 7);
        let p = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 1,
                skew: 5.0,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(p.shards[0].len(), 21);
        assert_eq!(p.majority_classes[0], vec![0, 1, 2]);
    }

    #[test]
    fn non_iid_validation() {
        let d = blobs(10, 10);
        let e = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 3,
                skew: 1.0,
                seed: 0,
            },
        );
        assert!(matches!(e, Err(Error::InvalidPartition(_))));
        let e = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 5,
                skew: 30.0,
                seed: 0,
            },
        );
        assert!(matches!(e, Err(Error::InvalidPartition(_))));
        let e = partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 2,
                skew: -1.0,
                seed: 0,
            },
        );
        assert!(matches!(e, Err(Error::InvalidPartition(_))));
        // s = 100/K is the uniform boundary and stays valid.
        assert!(partition_non_iid(
            &d,
            &PartitionSpec {
                clients: 5,
                skew: 20.0,
                seed: 0
            }
        )
        .is_ok());
    }

    #[test]
    fn iid_even_split() {
        let d = blobs(4, 10);
        let p = partition_iid(&d, 2, 5).unwrap();
        assert_partition_law(&p, d.len());
        for row in p.class_histogram(&d) {
            assert_eq!(row, vec![5, 5, 5, 5]);
        }
        let d = blobs(3, 7);
        let p = partition_iid(&d, 4, 5).unwrap();
        assert_partition_law(&p, d.len());
        let h = p.class_histogram(&d);
        for c in 0..3 {
            let col: Vec<usize> = h.iter().map(|r| r[c]).collect();
            assert!(col.iter().max().unwrap() - col.iter().min().unwrap() <= 1);
        }
        let sizes: Vec<usize> = p.shards.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,b,label\n0.1,0.2,0\n0.9,0.8,1\n0.5,0.5,1").unwrap();
        let d = load_csv(&path, false).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.class_count(), 2);
        assert_eq!(d.labels(), &[0, 1, 1]);

        let path2 = dir.path().join("raw.csv");
        std::fs::write(&path2, "x,y,label\n-2,10,0\n2,30,1\n").unwrap();
        assert!(load_csv(&path2, false).is_err());
        let d = load_csv(&path2, true).unwrap();
        assert_eq!(d.inputs().row(0), &[0.0, 0.0]);
        assert_eq!(d.inputs().row(1), &[1.0, 1.0]);

        let probe = load_probe_csv(&path, false).unwrap();
        assert_eq!(probe.shape(), (3, 2));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), false),
            Err(Error::Io { .. })
        ));
    }
}
