//! Labeled datasets with train/test/holdout tags, synthetic generators and
//! CSV import/export.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Holdout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Holdout => "holdout",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "holdout" => Some(Split::Holdout),
            _ => None,
        }
    }
}

/// Feature matrix, integer labels in `[0, K)` and one split tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, splits: Vec<Split>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Contract(format!("features must be a matrix, got {:?}", features.shape())));
        }
        let m = features.rows();
        if labels.len() != m || splits.len() != m {
            return Err(Error::Contract(format!(
                "{m} feature rows but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { features, labels, classes, splits })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
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

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rows `idx` as a new dataset, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Contract("cannot select zero rows".into()));
        }
        Ok(Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        })
    }

    pub fn subset(&self, split: Split) -> Result<Self> {
        self.select(&self.indices(split))
    }

    /// Same labels and tags with replaced features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::Contract(format!(
                "replacement features {:?} differ from {:?}",
                features.shape(),
                self.features.shape()
            )));
        }
        Ok(Self { features, ..self.clone() })
    }

    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            if split.is_none_or(|s| self.splits[i] == s) {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Checks that every split present holds at least one row of every class.
    pub fn check_split_coverage(&self) -> Result<()> {
        for split in [Split::Train, Split::Test, Split::Holdout] {
            let counts = self.class_counts(Some(split));
            if counts.iter().sum::<usize>() > 0 && counts.contains(&0) {
                return Err(Error::Contract(format!("split {} misses a class: {counts:?}", split.as_str())));
            }
        }
        Ok(())
    }

    /// Writes `features` (header `f0..f{n-1}`) and `labels` (header `label,split`).
    pub fn write_csv(&self, features_path: &Path, labels_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(features_path)?;
        w.write_record((0..self.dim()).map(|j| format!("f{j}")))?;
        for i in 0..self.len() {
            w.write_record(self.features.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(labels_path)?;
        w.write_record(["label", "split"])?;
        for (y, s) in self.labels.iter().zip(&self.splits) {
            w.write_record([y.to_string().as_str(), s.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a pair written by [`write_csv`](Self::write_csv). Header rows
    /// are optional. `classes` defaults to one more than the largest label.
    pub fn read_csv(features_path: &Path, labels_path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in headerless(features_path)?.records().enumerate() {
            let rec = rec?;
            if i == 0 && rec.iter().any(|f| f.trim().parse::<f64>().is_err()) {
                continue;
            }
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Contract(format!("bad feature `{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (i, rec) in headerless(labels_path)?.records().enumerate() {
            let rec = rec?;
            if i == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<usize>().is_err()) {
                continue;
            }
            let y = rec
                .get(0)
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Contract(format!("bad label record {rec:?}")))?;
            let split = match rec.get(1) {
                Some(s) => Split::parse(s.trim()).ok_or_else(|| Error::Contract(format!("bad split `{s}`")))?,
                None => Split::Train,
            };
            labels.push(y);
            splits.push(split);
        }
        let features = Tensor::from_rows(&rows)?;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels, classes, splits)
    }
}

/// A reader that hands every line back, the header included.
fn headerless(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(false).from_path(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    GaussianBlobs,
    ConcentricRings,
}

/// Parameters of a synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    /// Gaussian blobs: distance between any two class means, in units of the
    /// per-coordinate noise. Rings: radial gap between consecutive rings.
    pub separation: f64,
    pub seed: u64,
}

/// Fraction of each class assigned to train and test; the rest is holdout.
const TRAIN_FRACTION: f64 = 0.6;
const TEST_FRACTION: f64 = 0.2;
const RING_NOISE: f64 = 0.25;

/// Generates a reproducible, class-balanced synthetic dataset.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let (k, n, m) = (spec.classes, spec.features, spec.samples);
    if k < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {k}")));
    }
    if m < 10 * k {
        return Err(Error::Contract(format!("need at least {} samples for {k} classes, got {m}", 10 * k)));
    }
    if n == 0 || (spec.kind == SyntheticKind::ConcentricRings && n < 2) {
        return Err(Error::Contract(format!("feature width {n} too small for {:?}", spec.kind)));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Contract(format!("separation must be finite and >= 0, got {}", spec.separation)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(m * n);
    match spec.kind {
        SyntheticKind::GaussianBlobs => {
            let centers = blob_centers(k, n, spec.separation, &mut rng);
            for &y in &labels {
                for c in &centers[y] {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(c + z);
                }
            }
        }
        SyntheticKind::ConcentricRings => {
            for &y in &labels {
                let radius = 1.0 + y as f64 * spec.separation;
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius + RING_NOISE * rng.sample::<f64, _>(StandardNormal);
                data.push(r * angle.cos());
                data.push(r * angle.sin());
                for _ in 2..n {
                    data.push(RING_NOISE * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }

    let mut splits = vec![Split::Holdout; m];
    for class in 0..k {
        let rows: Vec<usize> = (0..m).filter(|&i| labels[i] == class).collect();
        let count = rows.len();
        let n_train = ((count as f64 * TRAIN_FRACTION).round() as usize).clamp(1, count - 2);
        let n_test = ((count as f64 * TEST_FRACTION).round() as usize).clamp(1, count - n_train - 1);
        for (j, &i) in rows.iter().enumerate() {
            splits[i] = if j < n_train {
                Split::Train
            } else if j < n_train + n_test {
                Split::Test
            } else {
                Split::Holdout
            };
        }
    }

    let ds = LabeledDataset::new(Tensor::matrix(m, n, data), labels, k, splits)?;
    ds.check_split_coverage()?;
    Ok(ds)
}

/// Class means with pairwise distance exactly `separation` when `k <= n`
/// (scaled orthonormal directions), approximately otherwise.
fn blob_centers(k: usize, n: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if basis.len() < n {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= proj * c);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let scale = separation / std::f64::consts::SQRT_2;
    basis.into_iter().map(|v| v.into_iter().map(|a| a * scale).collect()).collect()
}
