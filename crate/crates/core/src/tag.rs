//! Lookahead inter-task affinities measured during training.
//!
//! For a batch and a source task `j`, the trunk is moved one plain gradient
//! step along `j`'s loss and every other task's loss is re-evaluated:
//! `z[j][i] = 1 - L_i(θ') / L_i(θ)`. Heads are left untouched. The domain-wide
//! variant uses the summed gradient of all tasks except the target as source.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{training_subset, DataError, Dataset, FoldAssignment, Selection};
use crate::learner::{task_losses, task_trunk_grads, train_observed, Batch, LearnError, ModelConfig, Network, TrainedModel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TagError {
    #[error("no source/target pair has a defined affinity")]
    NoDefinedPairs,
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagConfig {
    /// Lookahead step size; `None` uses the training learning rate.
    pub lookahead_lr: Option<f64>,
    /// Record every `every`-th optimizer step.
    pub every: usize,
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig {
            lookahead_lr: None,
            every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRecord {
    pub step: usize,
    pub k: usize,
    /// `z[j * k + i]`: affinity of source `j` on target `i`. `NaN` on the
    /// diagonal and where undefined.
    pub z: Vec<f64>,
    /// Affinity of all other tasks together on each target.
    pub z_domain: Vec<f64>,
}

fn lookahead_losses(net: &Network, batch: &Batch<'_>, direction: &[f64], lr: f64) -> Vec<Option<f64>> {
    let trunk: Vec<f64> = net.trunk().iter().zip(direction).map(|(t, g)| t - lr * g).collect();
    task_losses(&net.with_trunk(&trunk), batch)
}

fn affinity(before: Option<f64>, after: Option<f64>) -> f64 {
    match (before, after) {
        (Some(l), Some(l2)) if l > 0.0 => 1.0 - l2 / l,
        _ => f64::NAN,
    }
}

/// Affinities of one batch at the current parameters.
pub fn affinity_step(net: &Network, batch: &Batch<'_>, lookahead_lr: f64, step: usize) -> Result<AffinityRecord, TagError> {
    let k = net.k;
    let base = task_losses(net, batch);
    let grads = task_trunk_grads(net, batch);
    let mut z = vec![f64::NAN; k * k];
    for (j, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let after = lookahead_losses(net, batch, g, lookahead_lr);
        for i in (0..k).filter(|&i| i != j) {
            z[j * k + i] = affinity(base[i], after[i]);
        }
    }
    if z.iter().all(|v| v.is_nan()) {
        return Err(TagError::NoDefinedPairs);
    }
    let mut total = vec![0.0; net.trunk_len()];
    for g in grads.iter().flatten() {
        total.iter_mut().zip(g).for_each(|(t, v)| *t += v);
    }
    let mut z_domain = vec![f64::NAN; k];
    for i in 0..k {
        if base[i].is_none() || !grads.iter().enumerate().any(|(j, g)| j != i && g.is_some()) {
            continue;
        }
        let mut others = total.clone();
        if let Some(gi) = &grads[i] {
            others.iter_mut().zip(gi).for_each(|(t, v)| *t -= v);
        }
        let after = lookahead_losses(net, batch, &others, lookahead_lr);
        z_domain[i] = affinity(base[i], after[i]);
    }
    Ok(AffinityRecord { step, k, z, z_domain })
}

/// Affinities averaged over the recorded steps of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSummary {
    pub k: usize,
    /// Mean `z[j * k + i]`; `NaN` where never defined.
    pub mean: Vec<f64>,
    pub counts: Vec<usize>,
    pub domain_mean: Vec<f64>,
    pub domain_counts: Vec<usize>,
    /// Steps at which an affinity record was taken.
    pub records: usize,
    pub model: TrainedModel,
}

fn accumulate(sum: &mut [f64], count: &mut [usize], values: &[f64]) {
    for ((s, c), v) in sum.iter_mut().zip(count.iter_mut()).zip(values) {
        if v.is_finite() {
            *s += v;
            *c += 1;
        }
    }
}

fn finish(sum: &[f64], count: &[usize]) -> Vec<f64> {
    sum.iter()
        .zip(count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect()
}

/// Trains as [`crate::learner::train`] does while recording affinities at
/// every `every`-th step, on the batch about to be applied. A run shorter
/// than `every` steps records its final step.
pub fn run_tag(ds: &Dataset, sel: &Selection, cfg: &ModelConfig, tag: &TagConfig) -> Result<TagSummary, TagError> {
    let k = ds.n_tasks();
    let lr = tag.lookahead_lr.unwrap_or(cfg.learning_rate);
    let every = tag.every.max(1);
    let mut sum = vec![0.0; k * k];
    let mut counts = vec![0usize; k * k];
    let mut dsum = vec![0.0; k];
    let mut dcounts = vec![0usize; k];
    let mut records = 0usize;
    let model = train_observed(ds, sel, cfg, |view| {
        let scheduled = (view.step + 1) % every == 0;
        let forced = view.step + 1 == view.total_steps && records == 0;
        if !(scheduled || forced) {
            return;
        }
        if let Ok(rec) = affinity_step(view.net, &view.batch, lr, view.step) {
            accumulate(&mut sum, &mut counts, &rec.z);
            accumulate(&mut dsum, &mut dcounts, &rec.z_domain);
            records += 1;
        }
    })?;
    Ok(TagSummary {
        k,
        mean: finish(&sum, &counts),
        counts,
        domain_mean: finish(&dsum, &dcounts),
        domain_counts: dcounts,
        records,
        model,
    })
}

/// [`run_tag`] on the multi-task training subset with `m` folds per task
/// under `shift`.
pub fn run_tag_setting(
    ds: &Dataset,
    fa: &FoldAssignment,
    shift: usize,
    m: usize,
    cfg: &ModelConfig,
    tag: &TagConfig,
) -> Result<TagSummary, TagError> {
    let fa = fa.with_shift(shift);
    let sel = training_subset(ds, &fa, &vec![m; ds.n_tasks()], None)?;
    run_tag(ds, &sel, cfg, tag)
}
