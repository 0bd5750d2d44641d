//! Shared-trunk multi-task classifier.
//!
//! One hidden ReLU layer of width `r` feeds `K` logistic heads. All
//! parameters live in one flat vector laid out as
//! `[trunk_w (r×d) | trunk_b (r) | head_w (K×r) | head_b (K)]`.
//!
//! The training objective for a mini-batch is the binary cross-entropy summed
//! over the selected labels and divided by the number of rows in the batch.
//! Per-task losses, used for affinity measurements, are means over that task's
//! selected labels in the batch.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Selection};
use crate::hash::StableHasher;

/// Clamp applied to probabilities inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("training selection is empty")]
    EmptySelection,
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("shape mismatch: expected width {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("task {task} has no labels in the batch")]
    NoLabels { task: usize },
    #[error("invalid model configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Trunk width.
    pub r: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            r: 64,
            learning_rate: 1e-4,
            epochs: 40,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.r == 0 {
            return Err(LearnError::Config("trunk width must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LearnError::Config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LearnError::Config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(LearnError::Config("invalid optimizer constants"));
        }
        Ok(())
    }

    /// Hash of every setting except the seed.
    pub fn stable_hash(&self) -> u64 {
        StableHasher::new()
            .str("model")
            .u64(self.r as u64)
            .f64(self.learning_rate)
            .u64(self.epochs as u64)
            .u64(self.batch_size as u64)
            .f64(self.beta1)
            .f64(self.beta2)
            .f64(self.epsilon)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub d: usize,
    pub r: usize,
    pub k: usize,
    pub params: Vec<f64>,
}

impl Network {
    pub fn param_count(d: usize, r: usize, k: usize) -> usize {
        r * d + r + k * r + k
    }

    /// He-uniform trunk weights (`±sqrt(6/d)`), heads uniform in `±1/sqrt(r)`,
    /// zero biases.
    pub fn init(d: usize, r: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; Self::param_count(d, r, k)];
        let tw = libm::sqrt(6.0 / d as f64);
        for w in &mut params[..r * d] {
            *w = rng.random_range(-tw..tw);
        }
        let hw = 1.0 / libm::sqrt(r as f64);
        let head = r * d + r;
        for w in &mut params[head..head + k * r] {
            *w = rng.random_range(-hw..hw);
        }
        Network { d, r, k, params }
    }

    /// Length of the shared (trunk) prefix of `params`.
    pub fn trunk_len(&self) -> usize {
        self.r * self.d + self.r
    }

    pub fn trunk(&self) -> &[f64] {
        &self.params[..self.trunk_len()]
    }

    pub fn heads(&self) -> &[f64] {
        &self.params[self.trunk_len()..]
    }

    /// Copy of the network with the trunk replaced.
    pub fn with_trunk(&self, trunk: &[f64]) -> Network {
        let mut params = self.params.clone();
        params[..self.trunk_len()].copy_from_slice(trunk);
        Network { params, ..*self }
    }

    /// Hidden activations and head logits for one input row.
    fn forward(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, r, k) = (self.d, self.r, self.k);
        let p = &self.params;
        let (tw, rest) = p.split_at(r * d);
        let (tb, rest) = rest.split_at(r);
        let (hw, hb) = rest.split_at(k * r);
        for (u, h) in hidden.iter_mut().enumerate() {
            let row = &tw[u * d..(u + 1) * d];
            let z: f64 = tb[u] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = z.max(0.0);
        }
        for (t, l) in logits.iter_mut().enumerate() {
            let row = &hw[t * r..(t + 1) * r];
            *l = hb[t] + row.iter().zip(hidden.iter()).map(|(w, h)| w * h).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: Network,
    pub config_hash: u64,
    pub seed: u64,
    /// Selected label count per task.
    pub counts: Vec<usize>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Cross-entropy of one label and its derivative with respect to the logit.
/// The derivative is zero where the probability is clamped.
fn bce(logit: f64, label: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let y = if label { 1.0 } else { 0.0 };
    let loss = -(y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc));
    let grad = if pc != p { 0.0 } else { p - y };
    (loss, grad)
}

/// Which labels of which rows enter a loss.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub ds: &'a Dataset,
    pub sel: &'a Selection,
    pub rows: &'a [usize],
}

impl Batch<'_> {
    fn label(&self, row: usize, task: usize) -> Option<bool> {
        if self.sel.includes(row, task) {
            self.ds.label(row, task)
        } else {
            None
        }
    }

    pub fn task_label_count(&self, task: usize) -> usize {
        self.rows.iter().filter(|&&r| self.label(r, task).is_some()).count()
    }
}

/// Training objective on `batch` and its gradient over all parameters.
pub fn loss_and_grad(net: &Network, batch: &Batch<'_>) -> (f64, Vec<f64>) {
    let (d, r, k) = (net.d, net.r, net.k);
    let mut grad = vec![0.0; net.params.len()];
    let mut hidden = vec![0.0; r];
    let mut logits = vec![0.0; k];
    let mut dz = vec![0.0; k];
    let mut dh = vec![0.0; r];
    let mut loss = 0.0;
    let head_w = r * d + r;
    let head_b = head_w + k * r;
    for &row in batch.rows {
        let x = batch.ds.row(row);
        net.forward(x, &mut hidden, &mut logits);
        let mut any = false;
        for t in 0..k {
            dz[t] = 0.0;
            if let Some(y) = batch.label(row, t) {
                let (l, g) = bce(logits[t], y);
                loss += l;
                dz[t] = g;
                any = true;
            }
        }
        if !any {
            continue;
        }
        dh.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..k {
            if dz[t] == 0.0 {
                continue;
            }
            let w = &net.params[head_w + t * r..head_w + (t + 1) * r];
            let gw = &mut grad[head_w + t * r..head_w + (t + 1) * r];
            for u in 0..r {
                gw[u] += dz[t] * hidden[u];
                dh[u] += dz[t] * w[u];
            }
            grad[head_b + t] += dz[t];
        }
        for u in 0..r {
            if hidden[u] <= 0.0 || dh[u] == 0.0 {
                continue;
            }
            let g = &mut grad[u * d..(u + 1) * d];
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += dh[u] * xi;
            }
            grad[r * d + u] += dh[u];
        }
    }
    let scale = 1.0 / batch.rows.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Mean cross-entropy of each task over its labels in `batch`; `None` for
/// tasks without labels there.
pub fn task_losses(net: &Network, batch: &Batch<'_>) -> Vec<Option<f64>> {
    let k = net.k;
    let mut hidden = vec![0.0; net.r];
    let mut logits = vec![0.0; k];
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for &row in batch.rows {
        net.forward(batch.ds.row(row), &mut hidden, &mut logits);
        for t in 0..k {
            if let Some(y) = batch.label(row, t) {
                sums[t] += bce(logits[t], y).0;
                counts[t] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Gradient of every task's mean loss over the trunk parameters, computed in
/// one pass; `None` for tasks without labels in `batch`.
pub fn task_trunk_grads(net: &Network, batch: &Batch<'_>) -> Vec<Option<Vec<f64>>> {
    let (d, r, k) = (net.d, net.r, net.k);
    let trunk_len = net.trunk_len();
    let head_w = trunk_len;
    let mut grads = vec![vec![0.0; trunk_len]; k];
    let mut counts = vec![0usize; k];
    let mut hidden = vec![0.0; r];
    let mut logits = vec![0.0; k];
    for &row in batch.rows {
        let x = batch.ds.row(row);
        net.forward(x, &mut hidden, &mut logits);
        for t in 0..k {
            let Some(y) = batch.label(row, t) else { continue };
            counts[t] += 1;
            let dz = bce(logits[t], y).1;
            if dz == 0.0 {
                continue;
            }
            let w = &net.params[head_w + t * r..head_w + (t + 1) * r];
            let g = &mut grads[t];
            for u in 0..r {
                if hidden[u] <= 0.0 {
                    continue;
                }
                let dh = dz * w[u];
                for (gi, xi) in g[u * d..(u + 1) * d].iter_mut().zip(x) {
                    *gi += dh * xi;
                }
                g[r * d + u] += dh;
            }
        }
    }
    grads
        .into_iter()
        .zip(counts)
        .map(|(mut g, c)| {
            (c > 0).then(|| {
                g.iter_mut().for_each(|v| *v /= c as f64);
                g
            })
        })
        .collect()
}

/// Gradient of `task`'s mean loss on `batch` over the trunk parameters.
pub fn shared_grad(net: &Network, batch: &Batch<'_>, task: usize) -> Result<Vec<f64>, LearnError> {
    if batch.task_label_count(task) == 0 {
        return Err(LearnError::NoLabels { task });
    }
    task_trunk_grads(net, batch)
        .swap_remove(task)
        .ok_or(LearnError::NoLabels { task })
}

/// Scores in `(0, 1)` for each row of the row-major `features`.
pub fn predict(net: &Network, features: &[f64]) -> Result<Vec<f64>, LearnError> {
    if features.len() % net.d != 0 {
        return Err(LearnError::ShapeMismatch {
            expected: net.d,
            got: features.len() % net.d,
        });
    }
    let n = features.len() / net.d;
    let mut out = Vec::with_capacity(n * net.k);
    let mut hidden = vec![0.0; net.r];
    let mut logits = vec![0.0; net.k];
    for x in features.chunks_exact(net.d) {
        net.forward(x, &mut hidden, &mut logits);
        out.extend(logits.iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

/// Scores for selected dataset rows, `rows.len() × K` row-major.
pub fn predict_rows(net: &Network, ds: &Dataset, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * net.k);
    let mut hidden = vec![0.0; net.r];
    let mut logits = vec![0.0; net.k];
    for &row in rows {
        net.forward(ds.row(row), &mut hidden, &mut logits);
        out.extend(logits.iter().map(|&z| sigmoid(z)));
    }
    out
}

/// State visible to a training observer after each optimizer step.
pub struct StepView<'a> {
    pub step: usize,
    pub total_steps: usize,
    /// Network before the step was applied.
    pub net: &'a Network,
    pub batch: Batch<'a>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, cfg: &ModelConfig, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (libm::sqrt(vh) + cfg.epsilon);
        }
    }
}

pub fn train(ds: &Dataset, sel: &Selection, cfg: &ModelConfig) -> Result<TrainedModel, LearnError> {
    train_observed(ds, sel, cfg, |_| {})
}

/// [`train`] with a callback invoked before every optimizer step.
pub fn train_observed<F>(ds: &Dataset, sel: &Selection, cfg: &ModelConfig, mut observe: F) -> Result<TrainedModel, LearnError>
where
    F: FnMut(&StepView<'_>),
{
    cfg.validate()?;
    if sel.is_empty() {
        return Err(LearnError::EmptySelection);
    }
    let mut net = Network::init(ds.n_features(), cfg.r, ds.n_tasks(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam {
        m: vec![0.0; net.params.len()],
        v: vec![0.0; net.params.len()],
        t: 0,
    };
    let mut order = sel.rows.clone();
    let per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch { ds, sel, rows: chunk };
            observe(&StepView {
                step,
                total_steps,
                net: &net,
                batch,
            });
            let (loss, grad) = loss_and_grad(&net, &batch);
            epoch_loss += loss;
            adam.step(cfg, &mut net.params, &grad);
            step += 1;
        }
        if !epoch_loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(LearnError::NonFiniteLoss { epoch });
        }
    }
    Ok(TrainedModel {
        net,
        config_hash: cfg.stable_hash(),
        seed: cfg.seed,
        counts: sel.counts.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_folds, synth_generate, training_subset, Grouping, SynthConfig};

    fn fixture() -> (Dataset, Selection) {
        let cfg = SynthConfig {
            n_rows: 120,
            d: 4,
            groups: vec![vec![0, 1], vec![2]],
            within_group_angle: 0.3,
            label_rate: vec![0.7, 0.5, 0.6],
            mnar_strength: 0.0,
            noise_sd: 0.3,
            n_row_groups: None,
            seed: 11,
        };
        let ds = synth_generate(&cfg).unwrap().dataset;
        let fa = assign_folds(&ds, 4, Grouping::Row, 2).unwrap();
        let sel = training_subset(&ds, &fa, &[3, 3, 3], None).unwrap();
        (ds, sel)
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (ds, sel) = fixture();
        let cfg = ModelConfig {
            r: 5,
            epochs: 0,
            seed: 9,
            ..ModelConfig::default()
        };
        let m = train(&ds, &sel, &cfg).unwrap();
        assert_eq!(m.net, Network::init(4, 5, 3, 9));
    }

    #[test]
    fn zero_heads_predict_one_half() {
        let mut net = Network::init(3, 4, 2, 1);
        let tl = net.trunk_len();
        net.params[tl..].iter_mut().for_each(|p| *p = 0.0);
        let scores = predict(&net, &[0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(scores.iter().all(|&s| s == 0.5));
        assert!(predict(&net, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn empty_selection_is_an_error() {
        let (ds, _) = fixture();
        let fa = assign_folds(&ds, 4, Grouping::Row, 2).unwrap();
        let sel = training_subset(&ds, &fa, &[0, 0, 0], None).unwrap();
        assert_eq!(
            train(&ds, &sel, &ModelConfig::default()),
            Err(LearnError::EmptySelection)
        );
    }

    #[test]
    fn shared_grad_needs_labels() {
        let (ds, sel) = fixture();
        let net = Network::init(4, 5, 3, 0);
        let rows: Vec<usize> = sel.rows.iter().copied().filter(|&r| !sel.includes(r, 1)).collect();
        let batch = Batch {
            ds: &ds,
            sel: &sel,
            rows: &rows,
        };
        assert_eq!(shared_grad(&net, &batch, 1), Err(LearnError::NoLabels { task: 1 }));
    }
}
