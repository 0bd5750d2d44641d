//! Parallel execution of the grid, the TAG sweep and the curve fits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mtlc_core::data::{Dataset, FoldAssignment};
use mtlc_core::fitter::{fit_staged, FitError, FitOptions, StagedFit};
use mtlc_core::grid::{
    average_over_shifts, fit_inputs, run_entry, GridFailure, GridKind, GridObservation, GridPlan, GridSpec, Metric,
};
use mtlc_core::learner::ModelConfig;
use mtlc_core::tag::{run_tag_setting, TagConfig, TagSummary};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tables::{grid_rows, read_grid, write_grid};

pub fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn expected_records(spec: &GridSpec, k: usize) -> usize {
    match spec.kind {
        GridKind::Stl => 1,
        _ => k,
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridRun {
    pub observations: Vec<GridObservation>,
    pub failures: Vec<GridFailure>,
    /// Entries taken from an earlier run.
    pub reused: usize,
    /// False when `stop_after` cut the run short.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GridOptions {
    pub parallelism: usize,
    pub resume: bool,
    /// Stop once this many entries have been executed in this call.
    pub stop_after: Option<usize>,
}

/// Runs every entry of `plan` not already present in `out`, appending each
/// finished entry's rows as it completes. A complete run rewrites `out`
/// sorted by spec key.
pub fn run_grid(
    plan: &GridPlan,
    ds: &Dataset,
    folds: &FoldAssignment,
    out: &Path,
    config_hash: &str,
    opts: GridOptions,
) -> Result<GridRun> {
    let planned: BTreeSet<GridSpec> = plan.entries.iter().copied().collect();
    let mut done: Vec<GridObservation> = Vec::new();
    if opts.resume && out.exists() {
        for (obs, hash) in read_grid(out, true)? {
            if hash == config_hash
                && planned.contains(&obs.spec)
                && obs.seed == plan.seed(&obs.spec)
                && obs.records.len() == expected_records(&obs.spec, plan.k)
            {
                done.push(obs);
            }
        }
    }
    let reused = done.len();
    // Start from a clean file holding only the reusable entries.
    write_grid(out, &done, config_hash)?;
    let have: BTreeSet<GridSpec> = done.iter().map(|o| o.spec).collect();
    let pending: Vec<GridSpec> = plan.entries.iter().filter(|s| !have.contains(s)).copied().collect();

    let file = OpenOptions::new().append(true).open(out).map_err(|e| Error::io(out, e))?;
    let sink = Mutex::new(csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file));
    let started = AtomicUsize::new(0);
    let limit = opts.stop_after.unwrap_or(usize::MAX);

    let results: Vec<Option<std::result::Result<GridObservation, GridFailure>>> = pool(opts.parallelism)?.install(|| {
        pending
            .par_iter()
            .map(|spec| {
                if started.fetch_add(1, Ordering::SeqCst) >= limit {
                    return None;
                }
                let res = run_entry(plan, spec, ds, folds);
                if let Ok(obs) = &res {
                    let mut w = sink.lock().expect("grid writer");
                    for row in grid_rows(obs, config_hash) {
                        let _ = w.write_record(&row);
                    }
                    let _ = w.flush();
                }
                Some(res)
            })
            .collect()
    });
    sink.into_inner()
        .expect("grid writer")
        .flush()
        .map_err(|e| Error::io(out, e))?;

    let complete = results.iter().all(Option::is_some);
    let mut failures = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(obs) => done.push(obs),
            Err(f) => failures.push(f),
        }
    }
    done.sort_by_key(|o| o.spec);
    failures.sort_by_key(|f| f.spec);
    if complete {
        let tmp = out.with_extension("csv.sorted");
        write_grid(&tmp, &done, config_hash)?;
        std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))?;
    }
    Ok(GridRun {
        observations: done,
        failures,
        reused,
        complete,
    })
}

/// TAG on every `(shift, m)` setting with `m` in `1..=m_max`. Each setting
/// reuses the training seed of the matching multi-task grid entry.
pub fn run_tag_sweep(
    plan: &GridPlan,
    ds: &Dataset,
    folds: &FoldAssignment,
    shifts: &[usize],
    tag: &TagConfig,
    parallelism: usize,
) -> Result<BTreeMap<(usize, usize), TagSummary>> {
    let settings: Vec<(usize, usize)> = shifts
        .iter()
        .flat_map(|&s| (1..=plan.m_max).map(move |m| (s, m)))
        .collect();
    let out: Vec<((usize, usize), std::result::Result<TagSummary, String>)> = pool(parallelism)?.install(|| {
        settings
            .par_iter()
            .map(|&(shift, m)| {
                let spec = GridSpec {
                    shift,
                    kind: GridKind::Mtl,
                    m,
                    target: None,
                    aux: None,
                };
                let cfg = ModelConfig {
                    seed: plan.seed(&spec),
                    ..plan.mtl_model
                };
                ((shift, m), run_tag_setting(ds, folds, shift, m, &cfg, tag).map_err(|e| e.to_string()))
            })
            .collect()
    });
    let mut map = BTreeMap::new();
    for (key, r) in out {
        match r {
            Ok(s) => {
                map.insert(key, s);
            }
            Err(e) => {
                return Err(Error::Numerical(format!("TAG at shift {} m {}: {e}", key.0, key.1)));
            }
        }
    }
    Ok(map)
}

/// Staged fits for one metric plus the failures, in task order.
#[derive(Debug, Clone, Default)]
pub struct MetricFits {
    pub fits: BTreeMap<usize, StagedFit>,
    /// `(task, stage, aux, error)`; stage 0 marks a failure before stage 3.
    pub failures: Vec<(usize, u8, Option<usize>, FitError)>,
}

/// Runs the staged protocol for every task and metric on shift-averaged
/// grid points.
pub fn fit_all(
    observations: &[GridObservation],
    k: usize,
    opts: &FitOptions,
    parallelism: usize,
) -> Result<BTreeMap<Metric, MetricFits>> {
    let records = average_over_shifts(observations).map_err(|e| Error::Numerical(e.to_string()))?;
    let jobs: Vec<(Metric, usize)> = Metric::ALL
        .iter()
        .flat_map(|&m| (0..k).map(move |t| (m, t)))
        .collect();
    let results: Vec<(Metric, usize, std::result::Result<StagedFit, FitError>)> = pool(parallelism)?.install(|| {
        jobs.par_iter()
            .map(|&(metric, t)| {
                let inputs = fit_inputs(&records, t, metric);
                let o = opts.derive(&[metric as u64]);
                (metric, t, fit_staged(&inputs.stl, &inputs.mtl, &inputs.stag, t, &o))
            })
            .collect()
    });
    let mut out: BTreeMap<Metric, MetricFits> = BTreeMap::new();
    for (metric, t, r) in results {
        let entry = out.entry(metric).or_default();
        match r {
            Ok(fit) => {
                for (&aux, e) in &fit.stage3_failures {
                    entry.failures.push((t, 3, Some(aux), e.clone()));
                }
                entry.fits.insert(t, fit);
            }
            Err(e) => entry.failures.push((t, 0, None, e)),
        }
    }
    Ok(out)
}
