//! The experiment grid: which models to train and what each one measures.
//!
//! Three kinds of grid point are trained per permutation shift:
//!
//! * STL `(target, m)`: the target task alone on its first `m` folds.
//! * MTL `(m)`: all tasks on their first `m` folds.
//! * STAG `(m, aux)`: the MTL `(m)` selection plus fold `m + 1` of the
//!   auxiliary task. It reuses the MTL `(m)` seed so the two runs differ only
//!   in data.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::curves::CurveArgs;
use crate::data::{training_subset, Dataset, FoldAssignment};
use crate::fitter::FitPoint;
use crate::hash::StableHasher;
use crate::learner::{predict_rows, train, ModelConfig};
use crate::metrics::task_metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GridKind {
    Stl,
    Mtl,
    Stag,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Stl => "STL",
            GridKind::Mtl => "MTL",
            GridKind::Stag => "STAG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "STL" => Some(GridKind::Stl),
            "MTL" => Some(GridKind::Mtl),
            "STAG" => Some(GridKind::Stag),
            _ => None,
        }
    }
}

/// Identity of one training job. Ordering is by shift, kind, m, target, aux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridSpec {
    pub shift: usize,
    pub kind: GridKind,
    pub m: usize,
    pub target: Option<usize>,
    pub aux: Option<usize>,
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} shift={} m={}", self.kind.name(), self.shift, self.m)?;
        if let Some(t) = self.target {
            write!(f, " target={t}")?;
        }
        if let Some(a) = self.aux {
            write!(f, " aux={a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    Config(&'static str),
    #[error("observations do not cover the same grid points in every shift")]
    SpecMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    pub k: usize,
    pub n_folds: usize,
    pub m_max: usize,
    pub master_seed: u64,
    /// Model settings for STL entries.
    pub stl_model: ModelConfig,
    /// Model settings for MTL and STAG entries.
    pub mtl_model: ModelConfig,
    pub entries: Vec<GridSpec>,
}

fn spec_seed(master: u64, spec: &GridSpec) -> u64 {
    let opt = |v: Option<usize>| v.map_or(u64::MAX, |x| x as u64);
    StableHasher::new()
        .u64(master)
        .u64(spec.shift as u64)
        .str(spec.kind.name())
        .u64(spec.m as u64)
        .u64(opt(spec.target))
        .u64(opt(spec.aux))
        .finish()
}

pub fn plan_grid(
    k: usize,
    n_folds: usize,
    m_max: usize,
    shifts: &[usize],
    master_seed: u64,
    stl_model: ModelConfig,
    mtl_model: ModelConfig,
) -> Result<GridPlan, GridError> {
    if k == 0 {
        return Err(GridError::Config("need at least one task"));
    }
    if n_folds < 2 {
        return Err(GridError::Config("need at least two folds"));
    }
    if m_max == 0 || m_max > n_folds - 1 {
        return Err(GridError::Config("m_max must lie in 1..n_folds-1"));
    }
    if shifts.is_empty() || shifts.iter().any(|&s| s >= n_folds) {
        return Err(GridError::Config("shifts must lie in 0..n_folds"));
    }
    let mut sorted = shifts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != shifts.len() {
        return Err(GridError::Config("duplicate shift"));
    }
    let mut entries = Vec::new();
    for &shift in &sorted {
        for m in 1..=m_max {
            for t in 0..k {
                entries.push(GridSpec {
                    shift,
                    kind: GridKind::Stl,
                    m,
                    target: Some(t),
                    aux: None,
                });
            }
            entries.push(GridSpec {
                shift,
                kind: GridKind::Mtl,
                m,
                target: None,
                aux: None,
            });
            if m < m_max {
                for j in 0..k {
                    entries.push(GridSpec {
                        shift,
                        kind: GridKind::Stag,
                        m,
                        target: None,
                        aux: Some(j),
                    });
                }
            }
        }
    }
    entries.sort_unstable();
    Ok(GridPlan {
        k,
        n_folds,
        m_max,
        master_seed,
        stl_model,
        mtl_model,
        entries,
    })
}

impl GridPlan {
    /// Training seed of `spec`. STAG entries share their MTL reference's seed.
    pub fn seed(&self, spec: &GridSpec) -> u64 {
        match spec.kind {
            GridKind::Stag => spec_seed(
                self.master_seed,
                &GridSpec {
                    kind: GridKind::Mtl,
                    aux: None,
                    ..*spec
                },
            ),
            _ => spec_seed(self.master_seed, spec),
        }
    }

    pub fn model(&self, kind: GridKind) -> &ModelConfig {
        match kind {
            GridKind::Stl => &self.stl_model,
            GridKind::Mtl | GridKind::Stag => &self.mtl_model,
        }
    }

    /// Hash of everything that determines the grid's results except the data.
    pub fn config_hash(&self) -> u64 {
        StableHasher::new()
            .str("grid")
            .u64(self.k as u64)
            .u64(self.n_folds as u64)
            .u64(self.m_max as u64)
            .u64(self.master_seed)
            .u64(self.stl_model.stable_hash())
            .u64(self.mtl_model.stable_hash())
            .finish()
    }
}

/// What one trained model measured on one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRecord {
    pub task: usize,
    pub n_t: f64,
    pub n_sigma: f64,
    pub n_aux: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_test_pos: f64,
    pub n_test_neg: f64,
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridObservation {
    pub spec: GridSpec,
    pub seed: u64,
    pub records: Vec<GridRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFailure {
    pub spec: GridSpec,
    pub seed: u64,
    pub reason: String,
}

/// Trains and evaluates one grid entry.
pub fn run_entry(plan: &GridPlan, spec: &GridSpec, ds: &Dataset, folds: &FoldAssignment) -> Result<GridObservation, GridFailure> {
    let seed = plan.seed(spec);
    let fail = |reason: String| GridFailure {
        spec: *spec,
        seed,
        reason,
    };
    let k = ds.n_tasks();
    if k != plan.k || folds.n_folds != plan.n_folds {
        return Err(fail("dataset or folds do not match the plan".to_string()));
    }
    let fa = folds.with_shift(spec.shift);
    let mut fold_counts = vec![spec.m; k];
    if spec.kind == GridKind::Stl {
        let t = spec.target.ok_or_else(|| fail("STL entry without target".into()))?;
        fold_counts.iter_mut().enumerate().for_each(|(i, c)| {
            if i != t {
                *c = 0;
            }
        });
    }
    let extra = if spec.kind == GridKind::Stag { spec.aux } else { None };
    let sel = training_subset(ds, &fa, &fold_counts, extra).map_err(|e| fail(e.to_string()))?;
    let cfg = ModelConfig {
        seed,
        ..*plan.model(spec.kind)
    };
    let model = train(ds, &sel, &cfg).map_err(|e| fail(e.to_string()))?;
    let test = fa.test_rows();
    let scores = predict_rows(&model.net, ds, &test);
    let tasks: Vec<usize> = match spec.kind {
        GridKind::Stl => vec![spec.target.unwrap_or(0)],
        _ => (0..k).collect(),
    };
    let metrics = task_metrics(&scores, ds, &tasks, &test).map_err(|e| fail(e.to_string()))?;
    let total: usize = sel.counts.iter().sum();
    let records = metrics
        .iter()
        .map(|tm| {
            let i = tm.task;
            let n_i = sel.counts[i];
            let (n_sigma, n_aux) = match (spec.kind, spec.aux) {
                (GridKind::Stl, _) => (0, 0),
                (GridKind::Stag, Some(j)) if j != i => (total - n_i - sel.counts[j], sel.extra_count),
                _ => (total - n_i, 0),
            };
            GridRecord {
                task: i,
                n_t: n_i as f64,
                n_sigma: n_sigma as f64,
                n_aux: n_aux as f64,
                auroc: tm.auroc,
                aupr: tm.aupr,
                n_test_pos: tm.n_pos as f64,
                n_test_neg: tm.n_neg as f64,
                defined: tm.auroc.is_some() && tm.aupr.is_some(),
            }
        })
        .collect();
    Ok(GridObservation {
        spec: *spec,
        seed,
        records,
    })
}

// ---------------------------------------------------------------------------
// Averaging over shifts and fit-point assembly
// ---------------------------------------------------------------------------

/// A grid point with the shift averaged out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointKey {
    pub kind: GridKind,
    pub m: usize,
    pub target: Option<usize>,
    pub aux: Option<usize>,
}

impl From<&GridSpec> for PointKey {
    fn from(s: &GridSpec) -> Self {
        PointKey {
            kind: s.kind,
            m: s.m,
            target: s.target,
            aux: s.aux,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedRecord {
    pub key: PointKey,
    pub task: usize,
    pub n_t: f64,
    pub n_sigma: f64,
    pub n_aux: f64,
    /// Mean over the shifts where the record is defined; `None` when the
    /// record is undefined overall.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_defined: usize,
    pub n_shifts: usize,
    pub defined: bool,
}

/// Averages records over permutation shifts.
///
/// Counts are averaged over all shifts, metrics over the shifts where they
/// are defined. A record counts as defined when it is defined in at least
/// half of the shifts.
pub fn average_over_shifts(observations: &[GridObservation]) -> Result<Vec<AveragedRecord>, GridError> {
    let mut by_shift: BTreeMap<usize, Vec<PointKey>> = BTreeMap::new();
    for o in observations {
        by_shift.entry(o.spec.shift).or_default().push(PointKey::from(&o.spec));
    }
    let mut sets = by_shift.into_values().map(|mut v| {
        v.sort_unstable();
        v
    });
    let first = sets.next().unwrap_or_default();
    let n_shifts = 1 + sets.len();
    for other in sets {
        if other != first {
            return Err(GridError::SpecMismatch);
        }
    }

    struct Acc {
        n: [f64; 3],
        auroc: (f64, usize),
        aupr: (f64, usize),
        n_defined: usize,
        shifts: usize,
    }
    let mut acc: BTreeMap<(PointKey, usize), Acc> = BTreeMap::new();
    for o in observations {
        for r in &o.records {
            let a = acc.entry((PointKey::from(&o.spec), r.task)).or_insert(Acc {
                n: [0.0; 3],
                auroc: (0.0, 0),
                aupr: (0.0, 0),
                n_defined: 0,
                shifts: 0,
            });
            a.n[0] += r.n_t;
            a.n[1] += r.n_sigma;
            a.n[2] += r.n_aux;
            a.shifts += 1;
            if r.defined {
                a.n_defined += 1;
            }
            if let (true, Some(v)) = (r.defined, r.auroc) {
                a.auroc.0 += v;
                a.auroc.1 += 1;
            }
            if let (true, Some(v)) = (r.defined, r.aupr) {
                a.aupr.0 += v;
                a.aupr.1 += 1;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((key, task), a)| {
            if a.shifts != n_shifts {
                return Err(GridError::SpecMismatch);
            }
            let s = a.shifts as f64;
            let defined = 2 * a.n_defined >= n_shifts;
            let mean = |(sum, c): (f64, usize)| (defined && c > 0).then(|| sum / c as f64);
            Ok(AveragedRecord {
                key,
                task,
                n_t: a.n[0] / s,
                n_sigma: a.n[1] / s,
                n_aux: a.n[2] / s,
                auroc: mean(a.auroc),
                aupr: mean(a.aupr),
                n_defined: a.n_defined,
                n_shifts,
                defined,
            })
        })
        .collect::<Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Auroc,
    Aupr,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Auroc, Metric::Aupr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Aupr => "aupr",
        }
    }

    pub fn of(self, r: &AveragedRecord) -> Option<f64> {
        match self {
            Metric::Auroc => r.auroc,
            Metric::Aupr => r.aupr,
        }
    }
}

/// Points for the three fitting stages of one target task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitInputs {
    pub stl: Vec<FitPoint>,
    pub mtl: Vec<FitPoint>,
    /// Per auxiliary task: MTL reference points with the auxiliary's own
    /// labels removed from `n_sigma`, plus the augmented STAG points.
    pub stag: BTreeMap<usize, Vec<FitPoint>>,
}

/// Collects defined fit points for `target` from shift-averaged records.
pub fn fit_inputs(records: &[AveragedRecord], target: usize, metric: Metric) -> FitInputs {
    let mut out = FitInputs::default();
    // n_j(m) of every task in the MTL reference runs.
    let mut mtl_counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.key.kind == GridKind::Mtl) {
        mtl_counts.insert((r.key.m, r.task), r.n_t);
    }
    let mut reference: Vec<(usize, f64, f64, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.task == target && r.defined) {
        let Some(value) = metric.of(r) else { continue };
        let fc = r.key.m as u32;
        match r.key.kind {
            GridKind::Stl => out.stl.push(FitPoint::new(CurveArgs::single(r.n_t), value, fc)),
            GridKind::Mtl => {
                out.mtl.push(FitPoint::new(CurveArgs::pair(r.n_t, r.n_sigma), value, fc));
                reference.push((r.key.m, r.n_t, r.n_sigma, value));
            }
            GridKind::Stag => match r.key.aux {
                Some(j) if j != target => out.stag.entry(j).or_default().push(FitPoint::new(
                    CurveArgs::triple(r.n_t, r.n_sigma, r.n_aux),
                    value,
                    fc,
                )),
                _ => {}
            },
        }
    }
    for (j, pts) in out.stag.iter_mut() {
        for &(m, n_t, n_sigma, value) in &reference {
            let n_j = mtl_counts.get(&(m, *j)).copied().unwrap_or(0.0);
            pts.push(FitPoint::new(CurveArgs::triple(n_t, n_sigma - n_j, 0.0), value, m as u32));
        }
    }
    out
}
