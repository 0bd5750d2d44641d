//! Constrained least-squares fitting of learning curves.
//!
//! [`fit_curve`] minimises the weighted sum of squared residuals with a
//! projected Levenberg-Marquardt iteration. Box constraints (`c ∈ [0,1]`,
//! `a_i ≥ 0`, `alpha ∈ (0,4]`) are enforced by projecting every trial point;
//! coefficients sitting on a bound whose descent direction points outward are
//! held fixed for that iteration. Each fit runs one start from the supplied
//! initial point plus `starts - 1` seeded perturbations of it and keeps the
//! lowest SSE.
//!
//! [`fit_staged`] chains three fits per target task: EXP3.1 on single-task
//! points, EXP3.2 on multi-task points with `a_i` frozen, and one EXP3.3 per
//! auxiliary task with `a_i` and `a_sigma` frozen.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curves::{eval_curve, partials, CurveArgs, CurveError, CurveFamily, Param, ParamSet};
use crate::hash::StableHasher;

/// One observed point of an empirical learning curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitPoint {
    pub args: CurveArgs,
    /// Observed performance in `[0, 1]`.
    pub value: f64,
    /// Number of training folds behind this point.
    pub fold_count: u32,
    pub weight: f64,
}

impl FitPoint {
    pub fn new(args: CurveArgs, value: f64, fold_count: u32) -> Self {
        FitPoint {
            args,
            value,
            fold_count,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub family: CurveFamily,
    pub params: ParamSet,
    pub sse: f64,
    pub n_points: usize,
    pub converged: bool,
    pub restarts_used: usize,
    /// Points dropped before fitting (ILOG2 points with scaled size <= 1).
    pub excluded_points: usize,
}

impl FitResult {
    pub fn predict(&self, args: &CurveArgs) -> Result<f64, CurveError> {
        eval_curve(self.family, &self.params, args)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Total starts: the initial point plus `starts - 1` perturbations.
    pub starts: usize,
    /// Log-scale standard deviation of the restart perturbations.
    pub perturbation: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub step_tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 16,
            perturbation: 0.5,
            max_iter: 200,
            rel_tol: 1e-10,
            step_tol: 1e-12,
            seed: 0,
        }
    }
}

impl FitOptions {
    /// Same options with a seed derived from `self.seed` and `parts`.
    pub fn derive(&self, parts: &[u64]) -> Self {
        let mut h = StableHasher::new().u64(self.seed);
        for p in parts {
            h = h.u64(*p);
        }
        FitOptions {
            seed: h.finish(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortfall {
    TooFewPoints { points: usize, params: usize },
    NoVariation(Param),
    TooFewFoldCounts { have: usize, need: usize },
    NeedTwoSizes,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shortfall::TooFewPoints { points, params } => {
                write!(f, "{points} point(s) for {params} free parameter(s)")
            }
            Shortfall::NoVariation(p) => {
                write!(f, "the argument multiplying {} takes a single value", p.name())
            }
            Shortfall::TooFewFoldCounts { have, need } => {
                write!(f, "{have} distinct fold count(s), need {need}")
            }
            Shortfall::NeedTwoSizes => f.write_str("need points at two distinct target sizes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("under-determined fit: {0}")]
    UnderDetermined(Shortfall),
    #[error("non-finite residual or Jacobian at the initial point")]
    NonFinite,
    #[error("invalid fit point: {0}")]
    InvalidPoint(&'static str),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

fn mean_value_at(points: &[FitPoint], n: f64) -> f64 {
    let (sum, count) = points
        .iter()
        .filter(|p| p.args.n_t == n)
        .fold((0.0, 0usize), |(s, c), p| (s + p.value, c + 1));
    sum / count as f64
}

/// Heuristic starting point for `family`.
///
/// `c0` is the largest observed value plus 0.01 (at most 1), `b0` the log of
/// the gap `c0 - value` at the smallest target size, and `a_i0` the slope of
/// the log-gap between the smallest and largest target sizes. Context and
/// pairwise rates start at zero and `alpha` at one. `n_scale` is the largest
/// target size, except for ILOG2 which works on raw counts (`n_scale = 1`) so
/// that `ln(n)` stays positive.
pub fn init_heuristic(points: &[FitPoint], family: CurveFamily) -> Result<ParamSet, FitError> {
    let usable: Vec<FitPoint> = match family {
        CurveFamily::Ilog2 => points.iter().copied().filter(|p| p.args.n_t > 1.0).collect(),
        _ => points.to_vec(),
    };
    let (n_min, n_max) = usable.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.args.n_t), hi.max(p.args.n_t))
    });
    if usable.len() < 2 || !(n_max > n_min) {
        return Err(FitError::UnderDetermined(Shortfall::NeedTwoSizes));
    }
    let v_max_obs = usable.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    let c0 = (v_max_obs + 0.01).min(1.0);
    let v_lo = mean_value_at(&usable, n_min);
    let v_hi = mean_value_at(&usable, n_max);
    let gap_lo = (c0 - v_lo).max(1e-6);
    let gap_hi = (c0 - v_hi).max(1e-6);

    let mut p = ParamSet {
        c: c0,
        b: libm::log(gap_lo),
        alpha: 1.0,
        ..ParamSet::default()
    };
    match family {
        CurveFamily::Ilog2 => {
            p.n_scale = 1.0;
            let span = 1.0 / libm::log(n_min) - 1.0 / libm::log(n_max);
            p.a_i = ((v_hi - v_lo) / span).max(0.0);
        }
        _ => {
            p.n_scale = n_max;
            let span = (n_max - n_min) / n_max;
            p.a_i = ((libm::log(gap_lo) - libm::log(gap_hi)) / span).max(0.0);
        }
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt core
// ---------------------------------------------------------------------------

struct Problem<'a> {
    family: CurveFamily,
    points: &'a [FitPoint],
    free: Vec<Param>,
    base: ParamSet,
}

impl Problem<'_> {
    fn with(&self, theta: &[f64]) -> ParamSet {
        let mut p = self.base;
        for (param, v) in self.free.iter().zip(theta) {
            p.set(*param, *v);
        }
        p
    }

    fn sse(&self, theta: &[f64]) -> Option<f64> {
        let params = self.with(theta);
        let mut sse = 0.0;
        for pt in self.points {
            let f = eval_curve(self.family, &params, &pt.args).ok()?;
            let r = f - pt.value;
            sse += pt.weight * r * r;
        }
        sse.is_finite().then_some(sse)
    }

    /// Normal equations `JᵀWJ` and `JᵀWr`, or `None` when anything is not
    /// finite.
    fn normal_equations(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.free.len();
        let params = self.with(theta);
        let mut a = vec![0.0; n * n];
        let mut g = vec![0.0; n];
        let mut row = vec![0.0; n];
        for pt in self.points {
            let f = eval_curve(self.family, &params, &pt.args).ok()?;
            let d = partials(self.family, &params, &pt.args).ok()?;
            let r = f - pt.value;
            for (slot, param) in row.iter_mut().zip(&self.free) {
                *slot = d[param.index()];
            }
            for i in 0..n {
                g[i] += pt.weight * row[i] * r;
                for j in 0..=i {
                    a[i * n + j] += pt.weight * row[i] * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                a[j * n + i] = a[i * n + j];
            }
        }
        (a.iter().chain(&g).all(|v| v.is_finite())).then_some((a, g))
    }

    fn project(&self, theta: &mut [f64]) {
        for (v, param) in theta.iter_mut().zip(&self.free) {
            let (lo, hi) = param.bounds();
            *v = v.clamp(lo, hi);
        }
    }
}

/// Solves the symmetric positive definite system `m x = rhs` in place by
/// Cholesky factorisation. Returns `None` if `m` is not positive definite.
fn cholesky_solve(m: &mut [f64], rhs: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = libm::sqrt(d);
        m[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= m[i * n + k] * rhs[k];
        }
        rhs[i] = s / m[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in (i + 1)..n {
            s -= m[k * n + i] * rhs[k];
        }
        rhs[i] = s / m[i * n + i];
    }
    Some(())
}

struct StartOutcome {
    theta: Vec<f64>,
    sse: f64,
    converged: bool,
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MIN: f64 = 1e-15;
const LAMBDA_MAX: f64 = 1e16;

fn run_lm(problem: &Problem<'_>, theta0: &[f64], opts: &FitOptions) -> Option<StartOutcome> {
    let n = problem.free.len();
    let mut theta = theta0.to_vec();
    problem.project(&mut theta);
    let mut sse = problem.sse(&theta)?;
    let mut lambda = LAMBDA_INIT;
    let mut converged = sse == 0.0;

    let mut iter = 0;
    while !converged && iter < opts.max_iter {
        iter += 1;
        let Some((a, g)) = problem.normal_equations(&theta) else {
            break;
        };
        // Coefficients pinned at a bound with the descent direction pointing
        // outward stay fixed this iteration.
        let active: Vec<usize> = (0..n)
            .filter(|&i| {
                let (lo, hi) = problem.free[i].bounds();
                !((theta[i] <= lo && g[i] > 0.0) || (theta[i] >= hi && g[i] < 0.0))
            })
            .collect();
        if active.is_empty() {
            converged = true;
            break;
        }
        let m = active.len();
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut lhs = vec![0.0; m * m];
            let mut rhs = vec![0.0; m];
            for (r, &i) in active.iter().enumerate() {
                rhs[r] = -g[i];
                for (c, &j) in active.iter().enumerate() {
                    lhs[r * m + c] = a[i * n + j];
                }
                lhs[r * m + r] += lambda * a[i * n + i].max(1e-12);
            }
            if cholesky_solve(&mut lhs, &mut rhs, m).is_none() {
                lambda *= 10.0;
                continue;
            }
            let mut trial = theta.clone();
            for (r, &i) in active.iter().enumerate() {
                trial[i] += rhs[r];
            }
            problem.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&theta).map(|(t, s)| t - s).collect();
            let step_norm = libm::sqrt(step.iter().map(|s| s * s).sum());
            if step_norm < opts.step_tol {
                converged = true;
                break;
            }
            match problem.sse(&trial) {
                Some(trial_sse) if trial_sse <= sse => {
                    // Predicted reduction of the linearised model along the
                    // projected step.
                    let mut quad = 0.0;
                    let mut lin = 0.0;
                    for i in 0..n {
                        lin += g[i] * step[i];
                        for j in 0..n {
                            quad += step[i] * a[i * n + j] * step[j];
                        }
                    }
                    let predicted = -(2.0 * lin + quad);
                    let actual_rel = (sse - trial_sse) / sse;
                    let predicted_rel = predicted.abs() / sse;
                    theta = trial;
                    sse = trial_sse;
                    lambda = (lambda / 3.0).max(LAMBDA_MIN);
                    accepted = true;
                    if sse == 0.0 || (actual_rel < opts.rel_tol && predicted_rel < opts.rel_tol) {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted && !converged {
            break;
        }
    }
    Some(StartOutcome {
        theta,
        sse,
        converged,
    })
}

fn perturb(problem: &Problem<'_>, theta0: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let max_arg = |f: fn(&CurveArgs) -> f64| {
        problem
            .points
            .iter()
            .map(|p| f(&p.args) / problem.base.n_scale)
            .fold(1.0, f64::max)
    };
    let mut theta = theta0.to_vec();
    for (v, param) in theta.iter_mut().zip(&problem.free) {
        let z: f64 = StandardNormal.sample(rng);
        *v = match param {
            // Log-normal factor on the gap exp(b) is a normal shift of b.
            Param::B => *v + sigma * z,
            Param::C | Param::Alpha => *v * libm::exp(sigma * z),
            Param::Ai | Param::Asigma | Param::Aij if v.abs() > 1e-12 => *v * libm::exp(sigma * z),
            // Zero rates get an additive kick sized so that the exponent moves
            // by about sigma at the largest argument.
            Param::Ai => (sigma * z).abs() / max_arg(|a| a.n_t),
            Param::Asigma => sigma * z / max_arg(|a| a.n_sigma),
            Param::Aij => sigma * z / max_arg(|a| a.n_aux),
        };
    }
    problem.project(&mut theta);
    theta
}

fn validate(points: &[FitPoint]) -> Result<(), FitError> {
    for p in points {
        if !(0.0..=1.0).contains(&p.value) {
            return Err(FitError::InvalidPoint("value outside [0, 1]"));
        }
        if p.fold_count < 1 {
            return Err(FitError::InvalidPoint("fold_count must be at least 1"));
        }
        if !(p.weight >= 0.0) || !p.weight.is_finite() {
            return Err(FitError::InvalidPoint("weight must be finite and non-negative"));
        }
    }
    Ok(())
}

fn rate_argument(p: Param) -> Option<fn(&CurveArgs) -> f64> {
    match p {
        Param::Ai => Some(|a| a.n_t),
        Param::Asigma => Some(|a| a.n_sigma),
        Param::Aij => Some(|a| a.n_aux),
        _ => None,
    }
}

/// Fits `family` to `points` starting from `init`. Coefficients frozen in
/// `init.freeze` are copied to the result unchanged, as is `init.n_scale`.
pub fn fit_curve(
    points: &[FitPoint],
    family: CurveFamily,
    init: &ParamSet,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    validate(points)?;
    let kept: Vec<FitPoint> = match family {
        CurveFamily::Ilog2 => points
            .iter()
            .copied()
            .filter(|p| p.args.n_t / init.n_scale > 1.0)
            .collect(),
        _ => points.to_vec(),
    };
    let excluded_points = points.len() - kept.len();
    let free = family.free_params(init.freeze);
    if kept.len() < free.len() {
        return Err(FitError::UnderDetermined(Shortfall::TooFewPoints {
            points: kept.len(),
            params: free.len(),
        }));
    }
    for &param in &free {
        if let Some(arg) = rate_argument(param) {
            let first = kept.first().map(|p| arg(&p.args));
            if kept.iter().all(|p| Some(arg(&p.args)) == first) {
                return Err(FitError::UnderDetermined(Shortfall::NoVariation(param)));
            }
        }
    }
    for p in &kept {
        eval_curve(family, init, &p.args)?;
    }

    let problem = Problem {
        family,
        points: &kept,
        free,
        base: *init,
    };
    let theta0: Vec<f64> = problem.free.iter().map(|p| init.get(*p)).collect();
    let mut projected0 = theta0.clone();
    problem.project(&mut projected0);
    if problem.sse(&projected0).is_none() || problem.normal_equations(&projected0).is_none() {
        return Err(FitError::NonFinite);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<StartOutcome> = None;
    let starts = opts.starts.max(1);
    for s in 0..starts {
        let start = if s == 0 {
            theta0.clone()
        } else {
            perturb(&problem, &theta0, opts.perturbation, &mut rng)
        };
        if let Some(outcome) = run_lm(&problem, &start, opts) {
            if best.as_ref().is_none_or(|b| outcome.sse < b.sse) {
                best = Some(outcome);
            }
        }
    }
    let best = best.ok_or(FitError::NonFinite)?;
    Ok(FitResult {
        family,
        params: problem.with(&best.theta),
        sse: best.sse,
        n_points: kept.len(),
        converged: best.converged,
        restarts_used: starts,
        excluded_points,
    })
}

/// Heuristic initialisation followed by [`fit_curve`].
pub fn fit_family(points: &[FitPoint], family: CurveFamily, opts: &FitOptions) -> Result<FitResult, FitError> {
    let init = init_heuristic(points, family)?;
    fit_curve(points, family, &init, opts)
}

// ---------------------------------------------------------------------------
// Staged protocol
// ---------------------------------------------------------------------------

/// Result of the three-stage protocol for one target task.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedFit {
    pub target: usize,
    /// EXP3.1 on single-task points.
    pub stage1: FitResult,
    /// EXP3.2 on multi-task points, `a_i` frozen from stage 1.
    pub stage2: FitResult,
    /// EXP3.3 per auxiliary task, `a_i` and `a_sigma` frozen.
    pub stage3: BTreeMap<usize, FitResult>,
    pub stage3_failures: BTreeMap<usize, FitError>,
}

/// Runs the three-stage fit for `target`.
///
/// `stag` maps each auxiliary task to its stage-3 points; these should hold
/// the multi-task reference points (with `n_aux = 0`) together with the points
/// augmented by the auxiliary's extra fold, all with `n_sigma` excluding the
/// auxiliary. All stages share the stage-1 `n_scale` so frozen rates keep
/// their meaning. A failing auxiliary is recorded in `stage3_failures`.
pub fn fit_staged(
    stl: &[FitPoint],
    mtl: &[FitPoint],
    stag: &BTreeMap<usize, Vec<FitPoint>>,
    target: usize,
    opts: &FitOptions,
) -> Result<StagedFit, FitError> {
    let t = target as u64;
    let stage1 = fit_family(stl, CurveFamily::Exp3_1, &opts.derive(&[t, 1]))?;
    let n_scale = stage1.params.n_scale;

    let mut init2 = init_heuristic(mtl, CurveFamily::Exp3_2)?;
    init2.n_scale = n_scale;
    init2.a_i = stage1.params.a_i;
    init2.freeze = init2.freeze.with(Param::Ai);
    let stage2 = fit_curve(mtl, CurveFamily::Exp3_2, &init2, &opts.derive(&[t, 2]))?;

    let mut stage3 = BTreeMap::new();
    let mut stage3_failures = BTreeMap::new();
    for (&aux, points) in stag {
        let attempt = init_heuristic(points, CurveFamily::Exp3_3).and_then(|mut init| {
            init.n_scale = n_scale;
            init.a_i = stage1.params.a_i;
            init.a_sigma = stage2.params.a_sigma;
            init.freeze = init.freeze.with(Param::Ai).with(Param::Asigma);
            fit_curve(points, CurveFamily::Exp3_3, &init, &opts.derive(&[t, 3, aux as u64]))
        });
        match attempt {
            Ok(fit) => {
                stage3.insert(aux, fit);
            }
            Err(e) => {
                stage3_failures.insert(aux, e);
            }
        }
    }
    Ok(StagedFit {
        target,
        stage1,
        stage2,
        stage3,
        stage3_failures,
    })
}

// ---------------------------------------------------------------------------
// Prequential error and family selection
// ---------------------------------------------------------------------------

fn distinct_fold_counts(points: &[FitPoint]) -> Vec<u32> {
    let mut fcs: Vec<u32> = points.iter().map(|p| p.fold_count).collect();
    fcs.sort_unstable();
    fcs.dedup();
    fcs
}

/// Cumulative squared error of predicting each next fold count's points from
/// a fit on all earlier ones.
///
/// With `p` free coefficients and distinct fold counts `f_1 < … < f_L`, the
/// curve is fitted on points with fold count `≤ f_k` and evaluated at `f_{k+1}`
/// for `k = p … L-1`. ILOG2 skips target points it cannot evaluate.
pub fn prequential_error(points: &[FitPoint], family: CurveFamily, opts: &FitOptions) -> Result<f64, FitError> {
    let p = family.params().len();
    let fcs = distinct_fold_counts(points);
    if fcs.len() < p + 1 {
        return Err(FitError::UnderDetermined(Shortfall::TooFewFoldCounts {
            have: fcs.len(),
            need: p + 1,
        }));
    }
    let mut total = 0.0;
    for k in p..fcs.len() {
        let horizon = fcs[k - 1];
        let history: Vec<FitPoint> = points.iter().copied().filter(|q| q.fold_count <= horizon).collect();
        let fit = fit_family(&history, family, &opts.derive(&[k as u64]))?;
        for q in points.iter().filter(|q| q.fold_count == fcs[k]) {
            match fit.predict(&q.args) {
                Ok(pred) => total += (pred - q.value) * (pred - q.value),
                Err(CurveError::DomainError(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(total)
}

/// Averages points sharing a fold count across permutation shifts.
pub fn average_points(by_shift: &BTreeMap<usize, Vec<FitPoint>>) -> Vec<FitPoint> {
    let mut acc: BTreeMap<u32, (CurveArgs, f64, usize)> = BTreeMap::new();
    for pts in by_shift.values() {
        for p in pts {
            let e = acc.entry(p.fold_count).or_insert((CurveArgs::default(), 0.0, 0));
            e.0.n_t += p.args.n_t;
            e.0.n_sigma += p.args.n_sigma;
            e.0.n_aux += p.args.n_aux;
            e.1 += p.value;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(fc, (args, value, count))| {
            let k = count as f64;
            FitPoint::new(
                CurveArgs::triple(args.n_t / k, args.n_sigma / k, args.n_aux / k),
                value / k,
                fc,
            )
        })
        .collect()
}

/// One row of the family-selection table. Error columns are means over tasks
/// (per-permutation columns: task means per shift, then the mean over
/// shifts); `NaN` when every fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub family: CurveFamily,
    /// SSE of fits on each permutation's points ("L2-9").
    pub l2: f64,
    /// SSE of fits on permutation-averaged points ("E[L2-9]").
    pub e_l2: f64,
    /// Prequential error per permutation ("preq").
    pub preq: f64,
    /// Prequential error on averaged points ("E[preq]").
    pub e_preq: f64,
    /// Failed fits excluded from each column, in column order.
    pub excluded: [usize; 4],
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Compares curve families on per-task points grouped by permutation shift.
/// All points of a task should come from one grid-point type.
pub fn select_family(
    points_by_task: &BTreeMap<usize, BTreeMap<usize, Vec<FitPoint>>>,
    families: &[CurveFamily],
    opts: &FitOptions,
) -> SelectionTable {
    let mut shifts: Vec<usize> = points_by_task.values().flat_map(|m| m.keys().copied()).collect();
    shifts.sort_unstable();
    shifts.dedup();

    let rows = families
        .iter()
        .map(|&family| {
            let fam = family as u64;
            let mut excluded = [0usize; 4];
            let mut l2_by_shift = Vec::new();
            let mut preq_by_shift = Vec::new();
            for &s in &shifts {
                let mut l2 = Vec::new();
                let mut preq = Vec::new();
                for (&task, by_shift) in points_by_task {
                    let Some(pts) = by_shift.get(&s) else { continue };
                    let o = opts.derive(&[fam, task as u64, s as u64]);
                    match fit_family(pts, family, &o) {
                        Ok(fit) => l2.push(fit.sse),
                        Err(_) => excluded[0] += 1,
                    }
                    match prequential_error(pts, family, &o) {
                        Ok(e) => preq.push(e),
                        Err(_) => excluded[2] += 1,
                    }
                }
                if !l2.is_empty() {
                    l2_by_shift.push(mean(&l2));
                }
                if !preq.is_empty() {
                    preq_by_shift.push(mean(&preq));
                }
            }
            let mut e_l2 = Vec::new();
            let mut e_preq = Vec::new();
            for (&task, by_shift) in points_by_task {
                let avg = average_points(by_shift);
                let o = opts.derive(&[fam, task as u64, u64::MAX]);
                match fit_family(&avg, family, &o) {
                    Ok(fit) => e_l2.push(fit.sse),
                    Err(_) => excluded[1] += 1,
                }
                match prequential_error(&avg, family, &o) {
                    Ok(e) => e_preq.push(e),
                    Err(_) => excluded[3] += 1,
                }
            }
            SelectionRow {
                family,
                l2: mean(&l2_by_shift),
                e_l2: mean(&e_l2),
                preq: mean(&preq_by_shift),
                e_preq: mean(&e_preq),
                excluded,
                tasks: points_by_task.len(),
            }
        })
        .collect();
    SelectionTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::FreezeMask;

    fn exp3_points(p: &ParamSet, ns: &[f64]) -> Vec<FitPoint> {
        ns.iter()
            .enumerate()
            .map(|(i, &n)| {
                let args = CurveArgs::single(n);
                FitPoint::new(args, eval_curve(CurveFamily::Exp3_1, p, &args).unwrap(), i as u32 + 1)
            })
            .collect()
    }

    #[test]
    fn recovers_exp3_from_exact_points() {
        let truth = ParamSet::exp3(2.0, -1.0, 0.9, 1.0);
        let ns: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let pts = exp3_points(&truth, &ns);
        let mut init = init_heuristic(&pts, CurveFamily::Exp3_1).unwrap();
        init.n_scale = 1.0;
        let fit = fit_curve(&pts, CurveFamily::Exp3_1, &init, &FitOptions::default()).unwrap();
        assert!(fit.sse < 1e-18, "sse {}", fit.sse);
        for (got, want) in [(fit.params.a_i, 2.0), (fit.params.b, -1.0), (fit.params.c, 0.9)] {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(fit.converged);
        assert_eq!(fit.restarts_used, 16);
    }

    #[test]
    fn too_few_points_is_under_determined() {
        let truth = ParamSet::exp3(2.0, -1.0, 0.9, 1.0);
        let pts = exp3_points(&truth, &[0.2, 0.4]);
        let init = init_heuristic(&pts, CurveFamily::Exp3_1).unwrap();
        assert!(matches!(
            fit_curve(&pts, CurveFamily::Exp3_1, &init, &FitOptions::default()),
            Err(FitError::UnderDetermined(Shortfall::TooFewPoints { points: 2, params: 3 }))
        ));
    }

    #[test]
    fn constant_data_is_reproduced() {
        let pts: Vec<FitPoint> = (1..=6)
            .map(|i| FitPoint::new(CurveArgs::single(i as f64 * 10.0), 0.75, i))
            .collect();
        let fit = fit_family(&pts, CurveFamily::Exp3_1, &FitOptions::default()).unwrap();
        assert!(fit.sse < 1e-10, "sse {}", fit.sse);
        for p in &pts {
            assert!((fit.predict(&p.args).unwrap() - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn heuristic_examples() {
        let pts = [
            FitPoint::new(CurveArgs::single(1.0), 0.6, 1),
            FitPoint::new(CurveArgs::single(9.0), 0.8, 2),
        ];
        let p = init_heuristic(&pts, CurveFamily::Exp3_1).unwrap();
        assert!((p.c - 0.81).abs() < 1e-15);
        assert!((p.b - 0.21f64.ln()).abs() < 1e-12);
        assert_eq!(p.n_scale, 9.0);
        assert_eq!((p.a_sigma, p.a_ij, p.alpha), (0.0, 0.0, 1.0));

        let flat = [
            FitPoint::new(CurveArgs::single(2.0), 0.7, 1),
            FitPoint::new(CurveArgs::single(5.0), 0.7, 2),
        ];
        assert_eq!(init_heuristic(&flat, CurveFamily::Exp3_1).unwrap().a_i, 0.0);

        let high = [
            FitPoint::new(CurveArgs::single(2.0), 0.9, 1),
            FitPoint::new(CurveArgs::single(5.0), 0.995, 2),
        ];
        assert_eq!(init_heuristic(&high, CurveFamily::Exp3_1).unwrap().c, 1.0);

        let single = [FitPoint::new(CurveArgs::single(2.0), 0.9, 1)];
        assert!(matches!(
            init_heuristic(&single, CurveFamily::Exp3_1),
            Err(FitError::UnderDetermined(Shortfall::NeedTwoSizes))
        ));
    }

    #[test]
    fn frozen_coefficients_are_untouched() {
        let truth = ParamSet::exp3(1.5, -1.2, 0.85, 1.0);
        let pts = exp3_points(&truth, &[0.1, 0.3, 0.5, 0.7, 0.9]);
        let mut init = init_heuristic(&pts, CurveFamily::Exp3_1).unwrap();
        init.a_i = 1.234_567_890_123;
        init.freeze = FreezeMask::NONE.with(Param::Ai);
        let fit = fit_curve(&pts, CurveFamily::Exp3_1, &init, &FitOptions::default()).unwrap();
        assert_eq!(fit.params.a_i.to_bits(), init.a_i.to_bits());
        assert_eq!(fit.params.n_scale.to_bits(), init.n_scale.to_bits());
    }

    #[test]
    fn invalid_points_are_rejected() {
        let pts = [
            FitPoint::new(CurveArgs::single(1.0), 1.2, 1),
            FitPoint::new(CurveArgs::single(2.0), 0.5, 2),
            FitPoint::new(CurveArgs::single(3.0), 0.5, 3),
        ];
        assert!(matches!(
            fit_family(&pts, CurveFamily::Exp3_1, &FitOptions::default()),
            Err(FitError::InvalidPoint(_))
        ));
    }

    #[test]
    fn prequential_needs_enough_fold_counts() {
        let truth = ParamSet::exp3(2.0, -1.0, 0.9, 9.0);
        let pts = exp3_points(&truth, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            prequential_error(&pts, CurveFamily::Exp3_1, &FitOptions::default()),
            Err(FitError::UnderDetermined(Shortfall::TooFewFoldCounts { have: 3, need: 4 }))
        ));
    }

    #[test]
    fn prequential_on_exact_and_constant_data() {
        let truth = ParamSet::exp3(2.0, -1.0, 0.9, 9.0);
        let ns: Vec<f64> = (1..=9).map(f64::from).collect();
        let pts = exp3_points(&truth, &ns);
        let e = prequential_error(&pts, CurveFamily::Exp3_1, &FitOptions::default()).unwrap();
        assert!(e < 1e-8, "prequential {e}");

        let flat: Vec<FitPoint> = (1..=9)
            .map(|i| FitPoint::new(CurveArgs::single(f64::from(i) * 7.0), 0.66, i))
            .collect();
        let e = prequential_error(&flat, CurveFamily::Exp3_1, &FitOptions::default()).unwrap();
        assert!(e < 1e-10, "prequential {e}");
    }

    #[test]
    fn selection_with_one_family_has_one_row() {
        let truth = ParamSet::exp3(2.0, -1.0, 0.9, 9.0);
        let ns: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut by_task = BTreeMap::new();
        let mut by_shift = BTreeMap::new();
        by_shift.insert(0, exp3_points(&truth, &ns));
        by_task.insert(0, by_shift);
        let table = select_family(&by_task, &[CurveFamily::Exp3_1], &FitOptions::default());
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].excluded, [0; 4]);
    }
}
