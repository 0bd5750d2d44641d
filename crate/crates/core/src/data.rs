//! Datasets with incomplete labels, synthetic generation and fold bookkeeping.
//!
//! Folds are rotated by a permutation shift: under shift `s` the fold at
//! position `p` is fold `(p + s) mod n_folds`. Positions `0..m` are the first
//! `m` training folds and the last position is the test fold.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("task {task} has no present label")]
    NoLabels { task: usize },
}

fn config(field: &'static str, reason: &str) -> DataError {
    DataError::Config {
        field,
        reason: reason.into(),
    }
}

/// Dense features with a partially observed binary label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    d: usize,
    k: usize,
    features: Vec<f64>,
    labels: Vec<bool>,
    present: Vec<bool>,
    groups: Option<Vec<String>>,
    task_names: Vec<String>,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from row-major `features` (`n_rows × d`) and
    /// `labels`/`present` (`n_rows × K`). Label values where `present` is
    /// false are kept but never read.
    pub fn new(
        features: Vec<f64>,
        labels: Vec<bool>,
        present: Vec<bool>,
        groups: Option<Vec<String>>,
        feature_names: Vec<String>,
        task_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let d = feature_names.len();
        let k = task_names.len();
        if d == 0 || k == 0 {
            return Err(DataError::Shape("need at least one feature and one task".into()));
        }
        if features.len() % d != 0 {
            return Err(DataError::Shape(format!("{} feature values for width {d}", features.len())));
        }
        let n_rows = features.len() / d;
        if labels.len() != n_rows * k || present.len() != n_rows * k {
            return Err(DataError::Shape(format!("label matrix is not {n_rows} x {k}")));
        }
        if groups.as_ref().is_some_and(|g| g.len() != n_rows) {
            return Err(DataError::Shape("one group id per row required".into()));
        }
        for t in 0..k {
            if !(0..n_rows).any(|i| present[i * k + t]) {
                return Err(DataError::NoLabels { task: t });
            }
        }
        Ok(Dataset {
            n_rows,
            d,
            k,
            features,
            labels,
            present,
            groups,
            task_names,
            feature_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn n_tasks(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// The label of `task` on `row`, or `None` if missing.
    pub fn label(&self, row: usize, task: usize) -> Option<bool> {
        let idx = row * self.k + task;
        self.present[idx].then(|| self.labels[idx])
    }

    pub fn is_present(&self, row: usize, task: usize) -> bool {
        self.present[row * self.k + task]
    }

    pub fn groups(&self) -> Option<&[String]> {
        self.groups.as_deref()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn present_count(&self, task: usize) -> usize {
        (0..self.n_rows).filter(|&i| self.is_present(i, task)).count()
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub d: usize,
    /// Partition of task indices `0..K` into latent groups.
    pub groups: Vec<Vec<usize>>,
    /// Angle in radians between each task's weights and its group direction.
    pub within_group_angle: f64,
    /// Per-task probability that a label is present.
    pub label_rate: Vec<f64>,
    /// Logit tilt of presence towards rows with a high task score.
    pub mnar_strength: f64,
    /// Temperature of the logistic label model; zero gives hard labels.
    pub noise_sd: f64,
    /// When set, rows get group ids `G0 … G{n-1}` drawn uniformly.
    pub n_row_groups: Option<usize>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn n_tasks(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.n_tasks();
        if self.n_rows == 0 {
            return Err(config("n_rows", "must be positive"));
        }
        if k == 0 || self.groups.iter().any(Vec::is_empty) {
            return Err(config("groups", "every group needs at least one task"));
        }
        let mut seen = vec![false; k];
        for &t in self.groups.iter().flatten() {
            if t >= k || seen[t] {
                return Err(config("groups", "must partition the tasks 0..K"));
            }
            seen[t] = true;
        }
        if self.d < self.groups.len() {
            return Err(config("d", "must be at least the number of groups"));
        }
        if !(0.0..=core::f64::consts::FRAC_PI_2).contains(&self.within_group_angle) {
            return Err(config("within_group_angle", "must lie in [0, pi/2]"));
        }
        if self.within_group_angle > 0.0 && self.d < 2 {
            return Err(config("d", "a positive angle needs d >= 2"));
        }
        if self.label_rate.len() != k {
            return Err(config("label_rate", "one rate per task required"));
        }
        if self.label_rate.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(config("label_rate", "rates must lie in (0, 1]"));
        }
        if !(self.mnar_strength >= 0.0) || !self.mnar_strength.is_finite() {
            return Err(config("mnar_strength", "must be finite and non-negative"));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(config("noise_sd", "must be finite and non-negative"));
        }
        if self.n_row_groups == Some(0) {
            return Err(config("n_row_groups", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// `K × K` cosine similarities of the task weight vectors, row-major.
    pub similarity: Vec<f64>,
    /// `K × d` unit task weight vectors, row-major.
    pub weights: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(dot(v, v));
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random unit vector orthogonal to every vector in `basis` (assumed
/// orthonormal).
fn orthogonal_unit(rng: &mut ChaCha8Rng, d: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        // Two Gram-Schmidt passes keep the residual projection at rounding level.
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
            }
        }
        if dot(&v, &v) > 1e-12 {
            normalize(&mut v);
            return v;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput, DataError> {
    cfg.validate()?;
    let k = cfg.n_tasks();
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut group_dirs: Vec<Vec<f64>> = Vec::with_capacity(cfg.groups.len());
    for _ in &cfg.groups {
        let basis: Vec<&[f64]> = group_dirs.iter().map(Vec::as_slice).collect();
        let v = orthogonal_unit(&mut rng, d, &basis);
        group_dirs.push(v);
    }
    let (s, c) = (libm::sin(cfg.within_group_angle), libm::cos(cfg.within_group_angle));
    let mut weights = vec![0.0; k * d];
    for (g, tasks) in cfg.groups.iter().enumerate() {
        for &t in tasks {
            let w = &mut weights[t * d..(t + 1) * d];
            if s == 0.0 {
                w.copy_from_slice(&group_dirs[g]);
            } else {
                let private = orthogonal_unit(&mut rng, d, &[&group_dirs[g]]);
                for i in 0..d {
                    w[i] = c * group_dirs[g][i] + s * private[i];
                }
                normalize(w);
            }
        }
    }
    let mut similarity = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            similarity[a * k + b] = if a == b {
                1.0
            } else {
                dot(&weights[a * d..(a + 1) * d], &weights[b * d..(b + 1) * d])
            };
        }
    }

    let n = cfg.n_rows;
    let features: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut labels = vec![false; n * k];
    let mut present = vec![false; n * k];
    for i in 0..n {
        let x = &features[i * d..(i + 1) * d];
        for t in 0..k {
            let score = dot(x, &weights[t * d..(t + 1) * d]);
            labels[i * k + t] = if cfg.noise_sd == 0.0 {
                score > 0.0
            } else {
                rng.random::<f64>() < sigmoid(score / cfg.noise_sd)
            };
            let rate = cfg.label_rate[t];
            let p_present = if rate >= 1.0 {
                1.0
            } else {
                sigmoid(libm::log(rate / (1.0 - rate)) + cfg.mnar_strength * score)
            };
            present[i * k + t] = rng.random::<f64>() < p_present;
        }
    }
    let groups = cfg
        .n_row_groups
        .map(|g| (0..n).map(|_| format!("G{}", rng.random_range(0..g))).collect());
    let dataset = Dataset::new(
        features,
        labels,
        present,
        groups,
        (0..d).map(|i| format!("f_{i}")).collect(),
        (0..k).map(|t| format!("y_{t}")).collect(),
    )?;
    Ok(SynthOutput {
        dataset,
        similarity,
        weights,
    })
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Row,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub fold_of_row: Vec<usize>,
    pub shift: usize,
    pub grouping: Grouping,
}

/// Draws a uniform fold per row, or per group id in sorted order when
/// `grouping` is [`Grouping::Group`].
pub fn assign_folds(ds: &Dataset, n_folds: usize, grouping: Grouping, seed: u64) -> Result<FoldAssignment, DataError> {
    if n_folds < 2 {
        return Err(config("n_folds", "need at least two folds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fold_of_row = match grouping {
        Grouping::Row => (0..ds.n_rows()).map(|_| rng.random_range(0..n_folds)).collect(),
        Grouping::Group => {
            let groups = ds
                .groups()
                .ok_or_else(|| config("grouping", "group-level folds need group ids"))?;
            let mut fold_of_group: BTreeMap<&str, usize> = groups.iter().map(|g| (g.as_str(), 0)).collect();
            for f in fold_of_group.values_mut() {
                *f = rng.random_range(0..n_folds);
            }
            groups.iter().map(|g| fold_of_group[g.as_str()]).collect()
        }
    };
    Ok(FoldAssignment {
        n_folds,
        fold_of_row,
        shift: 0,
        grouping,
    })
}

impl FoldAssignment {
    pub fn with_shift(&self, shift: usize) -> Self {
        FoldAssignment {
            shift: shift % self.n_folds,
            ..self.clone()
        }
    }

    /// Fold index at `position` under the current shift.
    pub fn fold_at(&self, position: usize) -> usize {
        (position + self.shift) % self.n_folds
    }

    /// Position of `row`'s fold under the current shift.
    pub fn position(&self, row: usize) -> usize {
        (self.fold_of_row[row] + self.n_folds - self.shift) % self.n_folds
    }

    pub fn test_rows(&self) -> Vec<usize> {
        (0..self.fold_of_row.len())
            .filter(|&r| self.position(r) == self.n_folds - 1)
            .collect()
    }

    /// Largest number of training folds.
    pub fn max_train_folds(&self) -> usize {
        self.n_folds - 1
    }
}

/// Labels selected for one training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// `n_rows × K`, true where the label is present and selected.
    pub include: Vec<bool>,
    pub n_tasks: usize,
    /// Rows carrying at least one selected label, ascending.
    pub rows: Vec<usize>,
    /// Selected label count per task.
    pub counts: Vec<usize>,
    /// Labels contributed by the extra fold.
    pub extra_count: usize,
}

impl Selection {
    pub fn includes(&self, row: usize, task: usize) -> bool {
        self.include[row * self.n_tasks + task]
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Selects, for each task `t`, its present labels in the first
/// `fold_counts[t]` folds. `extra = Some(j)` adds task `j`'s labels from the
/// next fold (position `fold_counts[j]`).
pub fn training_subset(
    ds: &Dataset,
    fa: &FoldAssignment,
    fold_counts: &[usize],
    extra: Option<usize>,
) -> Result<Selection, DataError> {
    let k = ds.n_tasks();
    if fold_counts.len() != k {
        return Err(config("fold_counts", "one count per task required"));
    }
    if fa.fold_of_row.len() != ds.n_rows() {
        return Err(config("folds", "fold assignment does not match the dataset"));
    }
    if fold_counts.iter().any(|&m| m > fa.max_train_folds()) {
        return Err(config("fold_counts", "the test fold cannot be used for training"));
    }
    if let Some(j) = extra {
        if j >= k {
            return Err(config("extra", "task index out of range"));
        }
        if fold_counts[j] + 1 > fa.max_train_folds() {
            return Err(config("extra", "the extra fold would be the test fold"));
        }
    }
    let mut include = vec![false; ds.n_rows() * k];
    let mut counts = vec![0usize; k];
    let mut extra_count = 0;
    let mut rows = Vec::new();
    for r in 0..ds.n_rows() {
        let pos = fa.position(r);
        let mut any = false;
        for t in 0..k {
            if !ds.is_present(r, t) {
                continue;
            }
            let regular = pos < fold_counts[t];
            let bonus = extra == Some(t) && pos == fold_counts[t];
            if regular || bonus {
                include[r * k + t] = true;
                counts[t] += 1;
                extra_count += usize::from(bonus);
                any = true;
            }
        }
        if any {
            rows.push(r);
        }
    }
    Ok(Selection {
        include,
        n_tasks: k,
        rows,
        counts,
        extra_count,
    })
}
