//! Analysis tables built from fitted curves, grid observations and TAG runs.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::curves::{marginal_gain, ArgSlot, CurveArgs, CurveFamily};
use crate::fitter::{FitResult, StagedFit};
use crate::grid::Metric;
use crate::metrics::{spearman, CorrResult, MetricError};

/// Smallest p-value written to reports.
pub const P_FLOOR: f64 = 1e-300;

/// A correlation, or why there is none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrCell {
    Value(CorrResult),
    /// A side has zero rank variance.
    Degenerate { n: usize },
    Insufficient { n: usize },
}

impl CorrCell {
    pub fn from_pairs(x: &[f64], y: &[f64]) -> Self {
        match spearman(x, y) {
            Ok(mut c) => {
                c.p = c.p.max(P_FLOOR);
                CorrCell::Value(c)
            }
            Err(MetricError::DegenerateInput) => CorrCell::Degenerate { n: x.len() },
            Err(_) => CorrCell::Insufficient { n: x.len() },
        }
    }

    pub fn value(&self) -> Option<CorrResult> {
        match self {
            CorrCell::Value(c) => Some(*c),
            _ => None,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            CorrCell::Value(c) => c.n,
            CorrCell::Degenerate { n } | CorrCell::Insufficient { n } => *n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coefficient {
    A,
    B,
    C,
}

impl Coefficient {
    pub const ALL: [Coefficient; 3] = [Coefficient::A, Coefficient::B, Coefficient::C];

    pub fn name(self) -> &'static str {
        match self {
            Coefficient::A => "a",
            Coefficient::B => "b",
            Coefficient::C => "c",
        }
    }
}

// ---------------------------------------------------------------------------
// Transfer decomposition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionRow {
    pub target: usize,
    pub aux: usize,
    pub a_i: f64,
    pub a_sigma: f64,
    pub a_ij: f64,
    pub b_i_sigma: f64,
    pub b_ij: f64,
    pub c_i_sigma: f64,
    pub c_ij: f64,
}

impl DecompositionRow {
    pub fn delta_b(&self) -> f64 {
        self.b_ij - self.b_i_sigma
    }

    pub fn delta_c(&self) -> f64 {
        self.c_ij - self.c_i_sigma
    }

    pub fn coefficient(&self, c: Coefficient) -> f64 {
        match c {
            Coefficient::A => self.a_ij,
            Coefficient::B => self.delta_b(),
            Coefficient::C => self.delta_c(),
        }
    }
}

/// One row per (target, auxiliary) pair with a stage-3 fit.
pub fn decomposition(fits: &BTreeMap<usize, StagedFit>) -> Vec<DecompositionRow> {
    let mut rows = Vec::new();
    for (&target, f) in fits {
        for (&aux, s3) in &f.stage3 {
            rows.push(DecompositionRow {
                target,
                aux,
                a_i: f.stage1.params.a_i,
                a_sigma: f.stage2.params.a_sigma,
                a_ij: s3.params.a_ij,
                b_i_sigma: f.stage2.params.b,
                b_ij: s3.params.b,
                c_i_sigma: f.stage2.params.c,
                c_ij: s3.params.c,
            });
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Single-task versus multi-task curves
// ---------------------------------------------------------------------------

/// EXP3.1 fits on single-task and multi-task points of one task, with the
/// observed metric of both at the largest fold count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StlMtlInput {
    pub task: usize,
    pub st: FitResult,
    pub mt: FitResult,
    pub st_value: f64,
    pub mt_value: f64,
}

fn coefficient_of(f: &FitResult, c: Coefficient) -> f64 {
    match c {
        Coefficient::A => f.params.a_i,
        Coefficient::B => f.params.b,
        Coefficient::C => f.params.c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterRow {
    pub metric: Metric,
    pub task: usize,
    pub st: [f64; 3],
    pub mt: [f64; 3],
    pub st_value: f64,
    pub mt_value: f64,
}

impl ScatterRow {
    pub fn delta(&self, c: Coefficient) -> f64 {
        self.mt[c as usize] - self.st[c as usize]
    }

    pub fn delta_value(&self) -> f64 {
        self.mt_value - self.st_value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlVsMtl {
    /// Spearman of `Δθ` against `Δmetric`, keyed by coefficient and metric.
    /// The coefficients come from curves fitted to that metric.
    pub table: BTreeMap<(Coefficient, Metric), CorrCell>,
    pub scatter: Vec<ScatterRow>,
}

pub fn stl_vs_mtl(inputs: &BTreeMap<Metric, Vec<StlMtlInput>>) -> StlVsMtl {
    let mut table = BTreeMap::new();
    let mut scatter = Vec::new();
    for (&metric, rows) in inputs {
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| r.task);
        let rows_out: Vec<ScatterRow> = sorted
            .iter()
            .map(|r| ScatterRow {
                metric,
                task: r.task,
                st: Coefficient::ALL.map(|c| coefficient_of(&r.st, c)),
                mt: Coefficient::ALL.map(|c| coefficient_of(&r.mt, c)),
                st_value: r.st_value,
                mt_value: r.mt_value,
            })
            .collect();
        let dv: Vec<f64> = rows_out.iter().map(ScatterRow::delta_value).collect();
        for c in Coefficient::ALL {
            let dc: Vec<f64> = rows_out.iter().map(|r| r.delta(c)).collect();
            table.insert((c, metric), CorrCell::from_pairs(&dc, &dv));
        }
        scatter.extend(rows_out);
    }
    StlVsMtl { table, scatter }
}

// ---------------------------------------------------------------------------
// TAG versus stage-3 coefficients
// ---------------------------------------------------------------------------

/// TAG mean affinity matrices keyed by `(shift, m)`, each `K × K` with
/// `z[j * K + i]` for source `j` and target `i`.
pub type TagMatrices = BTreeMap<(usize, usize), Vec<f64>>;

/// Pairwise mean over the selected matrices, ignoring `NaN` entries.
pub fn mean_affinity<'a>(k: usize, matrices: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut sum = alloc::vec![0.0; k * k];
    let mut n = alloc::vec![0usize; k * k];
    for m in matrices {
        for (idx, v) in m.iter().enumerate() {
            if v.is_finite() {
                sum[idx] += v;
                n[idx] += 1;
            }
        }
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TagVariant {
    /// TAG at one fold, averaged over shifts.
    OneFold,
    /// TAG averaged over every (shift, m) setting.
    Averaged,
}

impl TagVariant {
    pub fn name(self) -> &'static str {
        match self {
            TagVariant::OneFold => "1-fold",
            TagVariant::Averaged => "averaged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagVsMtlc {
    pub table: BTreeMap<(Coefficient, Metric, TagVariant), CorrCell>,
}

/// Affinity/coefficient pairs `(z[j][i], coefficient)` over all targets `i`
/// and auxiliaries `j` present in both inputs.
pub fn tag_pairs(z: &[f64], k: usize, rows: &[DecompositionRow], c: Coefficient) -> (Vec<f64>, Vec<f64>) {
    let mut sorted: Vec<&DecompositionRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.target, r.aux));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in sorted {
        if r.target >= k || r.aux >= k || r.target == r.aux {
            continue;
        }
        let zv = z[r.aux * k + r.target];
        let cv = r.coefficient(c);
        if zv.is_finite() && cv.is_finite() {
            xs.push(zv);
            ys.push(cv);
        }
    }
    (xs, ys)
}

pub fn tag_vs_mtlc(k: usize, tag: &TagMatrices, decomposition: &BTreeMap<Metric, Vec<DecompositionRow>>) -> TagVsMtlc {
    let one_fold = mean_affinity(k, tag.iter().filter(|((_, m), _)| *m == 1).map(|(_, v)| v));
    let averaged = mean_affinity(k, tag.values());
    let mut table = BTreeMap::new();
    for (&metric, rows) in decomposition {
        for c in Coefficient::ALL {
            for (variant, z) in [(TagVariant::OneFold, &one_fold), (TagVariant::Averaged, &averaged)] {
                let (xs, ys) = tag_pairs(z, k, rows, c);
                table.insert((c, metric, variant), CorrCell::from_pairs(&xs, &ys));
            }
        }
    }
    TagVsMtlc { table }
}

// ---------------------------------------------------------------------------
// Gain forecast
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastInput {
    pub task: usize,
    /// Stage-2 (EXP3.2) fit.
    pub fit: FitResult,
    pub n_t: f64,
    pub n_sigma: f64,
    /// Extra labels for the task under consideration.
    pub budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastRow {
    pub rank: usize,
    pub task: usize,
    pub n_t: f64,
    pub n_sigma: f64,
    pub current: f64,
    pub budget: f64,
    pub gain: f64,
    pub gain_per_label: f64,
}

/// Predicted gain of adding `budget` labels to each task, ranked by gain per
/// added label (ties by task). Tasks whose curve cannot be evaluated are
/// returned separately.
pub fn gain_forecast(inputs: &[ForecastInput]) -> (Vec<ForecastRow>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for inp in inputs {
        let args = CurveArgs::pair(inp.n_t, inp.n_sigma);
        let current = inp.fit.predict(&args);
        let gain = marginal_gain(CurveFamily::Exp3_2, &inp.fit.params, &args, inp.budget, ArgSlot::Target);
        match (current, gain) {
            (Ok(current), Ok(gain)) => rows.push(ForecastRow {
                rank: 0,
                task: inp.task,
                n_t: inp.n_t,
                n_sigma: inp.n_sigma,
                current,
                budget: inp.budget,
                gain,
                gain_per_label: if inp.budget > 0.0 { gain / inp.budget } else { 0.0 },
            }),
            _ => omitted.push(inp.task),
        }
    }
    rows.sort_by(|a, b| {
        b.gain_per_label
            .partial_cmp(&a.gain_per_label)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.task.cmp(&b.task))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    (rows, omitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::ParamSet;

    fn fit(family: CurveFamily, params: ParamSet) -> FitResult {
        FitResult {
            family,
            params,
            sse: 0.0,
            n_points: 5,
            converged: true,
            restarts_used: 1,
            excluded_points: 0,
        }
    }

    #[test]
    fn identical_fits_give_degenerate_cells() {
        let p = ParamSet::exp3(1.0, -1.0, 0.8, 10.0);
        let rows: Vec<StlMtlInput> = (0..5)
            .map(|t| StlMtlInput {
                task: t,
                st: fit(CurveFamily::Exp3_1, p),
                mt: fit(CurveFamily::Exp3_1, p),
                st_value: 0.7,
                mt_value: 0.7 + t as f64 * 0.01,
            })
            .collect();
        let mut inputs = BTreeMap::new();
        inputs.insert(Metric::Auroc, rows);
        let rep = stl_vs_mtl(&inputs);
        assert!(rep
            .table
            .values()
            .all(|c| matches!(c, CorrCell::Degenerate { n: 5 })));
    }

    #[test]
    fn zero_budget_gives_zero_gain() {
        let mut p = ParamSet::exp3(1.0, -1.0, 0.9, 100.0);
        p.a_sigma = 0.1;
        let inputs: Vec<ForecastInput> = (0..3)
            .map(|t| ForecastInput {
                task: t,
                fit: fit(CurveFamily::Exp3_2, p),
                n_t: 50.0 + t as f64,
                n_sigma: 400.0,
                budget: 0.0,
            })
            .collect();
        let (rows, omitted) = gain_forecast(&inputs);
        assert!(omitted.is_empty());
        assert!(rows.iter().all(|r| r.gain == 0.0 && r.gain_per_label == 0.0));
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn saturated_task_ranks_last() {
        let live = ParamSet {
            a_sigma: 0.0,
            ..ParamSet::exp3(1.0, -1.0, 0.9, 100.0)
        };
        let saturated = ParamSet::exp3(1.0, -30.0, 0.9, 100.0);
        let inputs = [
            ForecastInput {
                task: 0,
                fit: fit(CurveFamily::Exp3_2, saturated),
                n_t: 50.0,
                n_sigma: 0.0,
                budget: 20.0,
            },
            ForecastInput {
                task: 1,
                fit: fit(CurveFamily::Exp3_2, live),
                n_t: 50.0,
                n_sigma: 0.0,
                budget: 20.0,
            },
        ];
        let (rows, _) = gain_forecast(&inputs);
        assert_eq!(rows[1].task, 0);
        assert!(rows[1].gain.abs() < 1e-9);
        assert!((rows[1].current - 0.9).abs() < 1e-3);
    }

    #[test]
    fn all_zero_tag_matrix_is_degenerate() {
        let k = 4;
        let z = alloc::vec![0.0; k * k];
        let mut tag = TagMatrices::new();
        tag.insert((0, 1), z);
        let rows: Vec<DecompositionRow> = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| DecompositionRow {
                target: i,
                aux: j,
                a_i: 1.0,
                a_sigma: 0.1,
                a_ij: (i * k + j) as f64,
                b_i_sigma: -1.0,
                b_ij: -1.0 + j as f64,
                c_i_sigma: 0.8,
                c_ij: 0.8 + i as f64 * 0.01,
            })
            .collect();
        let mut dec = BTreeMap::new();
        dec.insert(Metric::Auroc, rows);
        let rep = tag_vs_mtlc(k, &tag, &dec);
        assert_eq!(rep.table.len(), 6);
        assert!(rep.table.values().all(|c| matches!(c, CorrCell::Degenerate { .. })));
    }
}
