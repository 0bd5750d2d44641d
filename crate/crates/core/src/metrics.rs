//! Ranking metrics and rank correlation.
//!
//! AUROC is the Mann-Whitney statistic with ties credited one half. AUPR is
//! average precision: positives are visited in order of decreasing score,
//! ties broken by original position, and the precision at each positive's
//! rank is averaged.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::Dataset;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("inputs have different lengths")]
    LengthMismatch,
    #[error("non-finite score")]
    NonFinite,
    #[error("need at least {0} pairs")]
    TooFew(usize),
    #[error("zero rank variance")]
    DegenerateInput,
}

/// Scores with binary labels and an optional presence mask.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLabels<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
    pub present: Option<&'a [bool]>,
}

impl<'a> ScoredLabels<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [bool]) -> Self {
        ScoredLabels {
            scores,
            labels,
            present: None,
        }
    }

    pub fn with_mask(mut self, present: &'a [bool]) -> Self {
        self.present = Some(present);
        self
    }

    /// Present `(score, label)` pairs in original order.
    fn pairs(&self) -> Result<Vec<(f64, bool)>, MetricError> {
        if self.scores.len() != self.labels.len() || self.present.is_some_and(|m| m.len() != self.scores.len()) {
            return Err(MetricError::LengthMismatch);
        }
        let mut out = Vec::with_capacity(self.scores.len());
        for i in 0..self.scores.len() {
            if self.present.is_some_and(|m| !m[i]) {
                continue;
            }
            if !self.scores[i].is_finite() {
                return Err(MetricError::NonFinite);
            }
            out.push((self.scores[i], self.labels[i]));
        }
        Ok(out)
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share the mean of ranks i+1..=j.
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

pub fn auroc(data: &ScoredLabels<'_>) -> Result<f64, MetricError> {
    let pairs = data.pairs()?;
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = ranks.iter().zip(&pairs).filter(|(_, p)| p.1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn aupr(data: &ScoredLabels<'_>) -> Result<f64, MetricError> {
    let pairs = data.pairs()?;
    let n_pos = pairs.iter().filter(|p| p.1).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("AUPR needs a positive"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[b]
            .0
            .partial_cmp(&pairs[a].0)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if pairs[i].1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrResult {
    pub r: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub n: usize,
}

/// Largest sample size for which the p-value is an exact permutation test.
pub const EXACT_PERMUTATION_MAX: usize = 9;

pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrResult, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch);
    }
    let n = x.len();
    if n < 3 {
        return Err(MetricError::TooFew(3));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mean = (n + 1) as f64 / 2.0;
    let sxx: f64 = rx.iter().map(|r| (r - mean) * (r - mean)).sum();
    let syy: f64 = ry.iter().map(|r| (r - mean) * (r - mean)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateInput);
    }
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let r = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    let p = if n <= EXACT_PERMUTATION_MAX {
        permutation_p(&rx, &ry)
    } else if r.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        stats::student_t_two_sided(r * libm::sqrt(df / (1.0 - r * r)), df)
    };
    Ok(CorrResult { r, p, n })
}

/// Fraction of the `n!` reorderings of `ry` whose rank correlation with `rx`
/// is at least as extreme as the observed one.
///
/// Average ranks are multiples of 1/2, so `Σ rx·ry` and its centring constant
/// are exact in `f64` and the comparison involves no rounding.
fn permutation_p(rx: &[f64], ry: &[f64]) -> f64 {
    let n = rx.len();
    let centre = n as f64 * ((n + 1) as f64 / 2.0) * ((n + 1) as f64 / 2.0);
    let dot = |perm: &[f64]| rx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>();
    let observed = (dot(ry) - centre).abs();

    // Heap's algorithm over all orderings.
    let mut perm = ry.to_vec();
    let mut c = vec![0usize; n];
    let mut extreme = usize::from((dot(&perm) - centre).abs() >= observed);
    let mut total = 1usize;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            if (dot(&perm) - centre).abs() >= observed {
                extreme += 1;
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    extreme as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    /// Two-sided p-value from the tie-corrected normal approximation.
    pub p: f64,
}

/// Wilcoxon-Mann-Whitney rank-sum test of `x` against `y`.
pub fn rank_sum_test(x: &[f64], y: &[f64]) -> Result<RankSumResult, MetricError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricError::TooFew(1));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&all);
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let n = n1 + n2;
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;

    let mut sorted = all.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Err(MetricError::DegenerateInput);
    }
    let z = (u - n1 * n2 / 2.0) / libm::sqrt(var);
    Ok(RankSumResult {
        u,
        z,
        p: stats::normal_two_sided(z),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    /// `None` when the task lacks one of the two classes on the rows.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Per-task AUROC and AUPR over `rows` of `ds`.
///
/// `scores` has one row per entry of `rows` and one column per task of `ds`,
/// row-major. Only rows where a task's label is present count for that task.
pub fn task_metrics(
    scores: &[f64],
    ds: &Dataset,
    tasks: &[usize],
    rows: &[usize],
) -> Result<Vec<TaskMetrics>, MetricError> {
    let k = ds.n_tasks();
    if scores.len() != rows.len() * k || tasks.iter().any(|&t| t >= k) || rows.iter().any(|&r| r >= ds.n_rows()) {
        return Err(MetricError::LengthMismatch);
    }
    let mut out = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (pos, &row) in rows.iter().enumerate() {
            if let Some(label) = ds.label(row, t) {
                s.push(scores[pos * k + t]);
                l.push(label);
            }
        }
        let n_pos = l.iter().filter(|&&b| b).count();
        let data = ScoredLabels::new(&s, &l);
        out.push(TaskMetrics {
            task: t,
            auroc: auroc(&data).ok(),
            aupr: aupr(&data).ok(),
            n_pos,
            n_neg: l.len() - n_pos,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.3];
        let l = [true, true, false];
        assert_eq!(auroc(&ScoredLabels::new(&s, &l)).unwrap(), 1.0);
        assert_eq!(auroc(&ScoredLabels::new(&[0.2, 0.8], &[true, false])).unwrap(), 0.0);
        assert_eq!(
            auroc(&ScoredLabels::new(&[0.5, 0.5, 0.1], &[true, false, false])).unwrap(),
            0.75
        );
        assert!(matches!(
            auroc(&ScoredLabels::new(&[0.5, 0.1], &[true, true])),
            Err(MetricError::Undefined(_))
        ));
    }

    #[test]
    fn aupr_examples() {
        let s = [0.9, 0.8, 0.3];
        let l = [true, true, false];
        assert_eq!(aupr(&ScoredLabels::new(&s, &l)).unwrap(), 1.0);
        assert_eq!(aupr(&ScoredLabels::new(&[0.9, 0.1], &[false, true])).unwrap(), 0.5);
        assert_eq!(aupr(&ScoredLabels::new(&[0.1, 0.4, 0.2], &[true; 3])).unwrap(), 1.0);
        assert!(aupr(&ScoredLabels::new(&[0.1], &[false])).is_err());
    }

    #[test]
    fn mask_drops_entries() {
        let s = [0.9, 0.1, 0.5];
        let l = [true, true, false];
        let m = [true, false, true];
        assert_eq!(auroc(&ScoredLabels::new(&s, &l).with_mask(&m)).unwrap(), 1.0);
    }

    #[test]
    fn spearman_examples() {
        let c = spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap();
        assert_eq!(c.r, 1.0);
        let c = spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]).unwrap();
        assert_eq!(c.r, -1.0);
        // Two of 3! orderings are as extreme as a perfect monotone match.
        assert!((c.p - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricError::DegenerateInput));
    }

    #[test]
    fn rank_sum_without_overlap() {
        let x = [5.0, 6.0, 7.0, 8.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let res = rank_sum_test(&x, &y).unwrap();
        assert_eq!(res.u, 16.0);
        assert!(res.z > 0.0);
        // Normal approximation with mean 8 and variance 4*4*9/12 = 12.
        let z = 8.0 / 12f64.sqrt();
        assert!((res.z - z).abs() < 1e-12);
    }
}
