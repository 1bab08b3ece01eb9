//! Datasets, forget/remain/test partitions and their file formats.
//!
//! Datasets are stored as CSV with a `label,f0,f1,...` header; splits are
//! stored as JSON index arrays tagged with the split mode.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SPLIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} vs {} labels", features.shape(), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::EmptySet("dataset"));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= class_count) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
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

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the listed rows into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.dim();
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.features.row(i));
            y.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), dim], x).expect("consistent"), y)
    }

    /// Same features, labels replaced at the given rows.
    pub fn relabeled(&self, changes: &[(usize, usize)]) -> Result<Self> {
        let mut labels = self.labels.clone();
        for &(i, l) in changes {
            labels[i] = l;
        }
        Self::new(self.features.clone(), labels, self.class_count)
    }
}

/// Gaussian clusters with seeded means on the radius-2 sphere and isotropic
/// per-class standard deviation `spread`. Rows are ordered class by class.
pub fn generate_blobs(
    seed: u64,
    n_per_class: usize,
    class_count: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || class_count == 0 || dim == 0 {
        return Err(Error::InvalidConfig("blob counts must be >= 1".into()));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidConfig(format!("spread must be > 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(class_count);
    while means.len() < class_count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            means.push(v.into_iter().map(|a| 2.0 * a / n).collect::<Vec<_>>());
        }
    }
    let mut x = Vec::with_capacity(n_per_class * class_count * dim);
    let mut y = Vec::with_capacity(n_per_class * class_count);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                x.push(m + spread * z);
            }
            y.push(c);
        }
    }
    let features = Tensor::new(vec![y.len(), dim], x)?;
    Dataset::new(features, y, class_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    RandomSubset { fraction: f64 },
    Classwise { class_id: usize },
}

/// Index partition into forgetting, remaining and held-out test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetSplit {
    pub mode: SplitMode,
    pub forget_idx: Vec<usize>,
    pub remain_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ForgetSplit {
    /// Checks non-emptiness and pairwise disjointness; with `universe`, also
    /// that every index is in range.
    pub fn validate(&self, universe: Option<usize>) -> Result<()> {
        if self.forget_idx.is_empty() {
            return Err(Error::InvalidSplit("forget set is empty".into()));
        }
        if self.remain_idx.is_empty() {
            return Err(Error::InvalidSplit("remain set is empty".into()));
        }
        let mut seen = HashSet::new();
        for (name, set) in [
            ("forget", &self.forget_idx),
            ("remain", &self.remain_idx),
            ("test", &self.test_idx),
        ] {
            for &i in set {
                if !seen.insert(i) {
                    return Err(Error::InvalidSplit(format!(
                        "index {i} appears twice (second time in {name})"
                    )));
                }
                if let Some(n) = universe {
                    if i >= n {
                        return Err(Error::InvalidSplit(format!(
                            "{name} index {i} out of range for {n} rows"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn train_len(&self) -> usize {
        self.forget_idx.len() + self.remain_idx.len()
    }

    /// Forgetting share `|D^f| / (|D^f| + |D^r|)`.
    pub fn p_forget(&self) -> f64 {
        self.forget_idx.len() as f64 / self.train_len() as f64
    }

    pub fn p_remain(&self) -> f64 {
        self.remain_idx.len() as f64 / self.train_len() as f64
    }

    pub fn train_idx(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.forget_idx.iter().chain(&self.remain_idx).copied().collect();
        v.sort_unstable();
        v
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Random-subset forgetting: the test rows are drawn first, then
/// `round(fraction · pool)` of the remaining pool become the forgetting set.
pub fn make_random_subset_split(
    dataset: &Dataset,
    fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<ForgetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("fraction must be in (0,1), got {fraction}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must be in [0,1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_test = round_count(test_fraction, order.len());
    let (test, pool) = order.split_at(n_test);
    let n_forget = round_count(fraction, pool.len());
    let (forget, remain) = pool.split_at(n_forget);
    let split = ForgetSplit {
        mode: SplitMode::RandomSubset { fraction },
        forget_idx: sorted(forget),
        remain_idx: sorted(remain),
        test_idx: sorted(test),
    };
    split.validate(Some(dataset.len()))?;
    Ok(split)
}

/// Class-wise forgetting: every training row of `class_id` is forgotten.
///
/// Test rows are drawn per class at `test_fraction` from the other classes
/// only, so the test set never contains the forgotten class and the three
/// sets still cover the whole dataset.
pub fn make_classwise_split(
    dataset: &Dataset,
    class_id: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<ForgetSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must be in [0,1), got {test_fraction}"
        )));
    }
    if !dataset.labels().contains(&class_id) {
        return Err(Error::InvalidSplit(format!("class {class_id} not present in dataset")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forget = Vec::new();
    let mut remain = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.class_count() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels()[i] == c)
            .collect();
        if c == class_id {
            forget = members;
            continue;
        }
        members.shuffle(&mut rng);
        let n_test = round_count(test_fraction, members.len());
        test.extend_from_slice(&members[..n_test]);
        remain.extend_from_slice(&members[n_test..]);
    }
    let split = ForgetSplit {
        mode: SplitMode::Classwise { class_id },
        forget_idx: sorted(&forget),
        remain_idx: sorted(&remain),
        test_idx: sorted(&test),
    };
    split.validate(Some(dataset.len()))?;
    Ok(split)
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    schema_version: u32,
    #[serde(flatten)]
    split: ForgetSplit,
}

pub fn save_split(split: &ForgetSplit, path: &Path) -> Result<()> {
    let file = SplitFile {
        schema_version: SPLIT_SCHEMA_VERSION,
        split: split.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<ForgetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SplitFile = serde_json::from_str(&text)?;
    if file.schema_version != SPLIT_SCHEMA_VERSION {
        return Err(Error::InvalidSplit(format!(
            "unknown schema_version {}",
            file.schema_version
        )));
    }
    file.split.validate(None)?;
    Ok(file.split)
}

/// Writes `label,f0,f1,...` with every feature in 17 significant digits.
pub fn save_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..dataset.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..dataset.len() {
        out.push_str(&dataset.labels()[i].to_string());
        for v in dataset.features().row(i) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads the CSV layout written by [`save_csv_dataset`]. The class count is
/// one more than the largest label.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            line: 1,
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Csv {
            line: 1,
            reason: "header must be label,f0,f1,...".into(),
        });
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Csv {
                line: 1,
                reason: format!("expected column f{j}, found {name:?}"),
            });
        }
    }
    let dim = headers.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(Error::Csv {
                line,
                reason: format!("expected {} fields, got {}", dim + 1, record.len()),
            });
        }
        let label: usize = record[0].trim().parse().map_err(|_| Error::Csv {
            line,
            reason: format!("label {:?} is not a non-negative integer", &record[0]),
        })?;
        y.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                line,
                reason: format!("feature {field:?} is not a number"),
            })?;
            x.push(v);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptySet("csv dataset"));
    }
    let class_count = y.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(Tensor::new(vec![y.len(), dim], x)?, y, class_count)
}
