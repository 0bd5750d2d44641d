//! Grid, fit and TAG CSV tables.
//!
//! Task indices are 0-based; `-1` marks an absent target or auxiliary task.
//! Missing metrics are empty fields.

use std::collections::BTreeMap;
use std::path::Path;

use mtlc_core::curves::{CurveFamily, FreezeMask, ParamSet};
use mtlc_core::fitter::{FitError, FitResult, StagedFit};
use mtlc_core::grid::{GridFailure, GridKind, GridObservation, GridRecord, GridSpec};
use mtlc_core::tag::TagSummary;

use crate::error::{Error, Result};
use crate::io::{csv_err, finish, fmt_f64, fmt_opt, reader, writer};

pub const GRID_COLUMNS: [&str; 16] = [
    "shift",
    "kind",
    "m",
    "target_task",
    "aux_task",
    "task",
    "n_t",
    "n_sigma",
    "n_aux",
    "auroc",
    "aupr",
    "n_test_pos",
    "n_test_neg",
    "defined",
    "seed",
    "config_hash",
];

fn opt_index(v: Option<usize>) -> String {
    v.map_or_else(|| "-1".to_string(), |x| x.to_string())
}

pub fn grid_rows(obs: &GridObservation, config_hash: &str) -> Vec<[String; 16]> {
    obs.records
        .iter()
        .map(|r| {
            [
                obs.spec.shift.to_string(),
                obs.spec.kind.name().to_string(),
                obs.spec.m.to_string(),
                opt_index(obs.spec.target),
                opt_index(obs.spec.aux),
                r.task.to_string(),
                fmt_f64(r.n_t),
                fmt_f64(r.n_sigma),
                fmt_f64(r.n_aux),
                fmt_opt(r.auroc),
                fmt_opt(r.aupr),
                fmt_f64(r.n_test_pos),
                fmt_f64(r.n_test_neg),
                u8::from(r.defined).to_string(),
                obs.seed.to_string(),
                config_hash.to_string(),
            ]
        })
        .collect()
}

pub fn write_grid(path: &Path, observations: &[GridObservation], config_hash: &str) -> Result<()> {
    let mut sorted: Vec<&GridObservation> = observations.iter().collect();
    sorted.sort_by_key(|o| o.spec);
    let mut w = writer(path)?;
    w.write_record(GRID_COLUMNS).map_err(|e| csv_err(path, e))?;
    for o in sorted {
        for row in grid_rows(o, config_hash) {
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

/// Grid observations in a file, grouped by entry, with each entry's config
/// hash. Malformed rows (for example a torn final line) are skipped when
/// `lenient` is set.
pub fn read_grid(path: &Path, lenient: bool) -> Result<Vec<(GridObservation, String)>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(GRID_COLUMNS.iter().copied()) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "unexpected grid header".into(),
        });
    }
    let mut by_spec: BTreeMap<GridSpec, (GridObservation, String)> = BTreeMap::new();
    for rec in rdr.records() {
        let parsed = rec.map_err(|e| csv_err(path, e)).and_then(|rec| parse_grid_row(path, &rec));
        let (spec, seed, record, hash) = match parsed {
            Ok(v) => v,
            Err(_) if lenient => continue,
            Err(e) => return Err(e),
        };
        let entry = by_spec.entry(spec).or_insert_with(|| {
            (
                GridObservation {
                    spec,
                    seed,
                    records: Vec::new(),
                },
                hash.clone(),
            )
        });
        if entry.1 != hash || entry.0.seed != seed {
            if lenient {
                continue;
            }
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("inconsistent seed or hash for {spec}"),
            });
        }
        entry.0.records.push(record);
    }
    Ok(by_spec.into_values().collect())
}

fn parse_grid_row(path: &Path, rec: &csv::StringRecord) -> Result<(GridSpec, u64, GridRecord, String)> {
    let line = rec.position().map_or(0, csv::Position::line);
    let err = |col: usize| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: GRID_COLUMNS[col].to_string(),
        message: format!("bad value {:?}", rec.get(col).unwrap_or("")),
    };
    if rec.len() != GRID_COLUMNS.len() {
        return Err(err(0));
    }
    let usize_at = |c: usize| rec[c].parse::<usize>().map_err(|_| err(c));
    let f64_at = |c: usize| rec[c].parse::<f64>().map_err(|_| err(c));
    let opt_f64 = |c: usize| {
        if rec[c].is_empty() {
            Ok(None)
        } else {
            rec[c].parse::<f64>().map(Some).map_err(|_| err(c))
        }
    };
    let opt_task = |c: usize| match rec[c].parse::<i64>() {
        Ok(-1) => Ok(None),
        Ok(v) if v >= 0 => Ok(Some(v as usize)),
        _ => Err(err(c)),
    };
    let spec = GridSpec {
        shift: usize_at(0)?,
        kind: GridKind::parse(&rec[1]).ok_or_else(|| err(1))?,
        m: usize_at(2)?,
        target: opt_task(3)?,
        aux: opt_task(4)?,
    };
    let record = GridRecord {
        task: usize_at(5)?,
        n_t: f64_at(6)?,
        n_sigma: f64_at(7)?,
        n_aux: f64_at(8)?,
        auroc: opt_f64(9)?,
        aupr: opt_f64(10)?,
        n_test_pos: f64_at(11)?,
        n_test_neg: f64_at(12)?,
        defined: match &rec[13] {
            "1" => true,
            "0" => false,
            _ => return Err(err(13)),
        },
    };
    let seed = rec[14].parse::<u64>().map_err(|_| err(14))?;
    Ok((spec, seed, record, rec[15].to_string()))
}

pub fn write_grid_failures(path: &Path, failures: &[GridFailure], config_hash: &str) -> Result<()> {
    let mut sorted: Vec<&GridFailure> = failures.iter().collect();
    sorted.sort_by_key(|f| f.spec);
    let mut w = writer(path)?;
    w.write_record(["shift", "kind", "m", "target_task", "aux_task", "seed", "config_hash", "reason"])
        .map_err(|e| csv_err(path, e))?;
    for f in sorted {
        w.write_record([
            f.spec.shift.to_string(),
            f.spec.kind.name().to_string(),
            f.spec.m.to_string(),
            opt_index(f.spec.target),
            opt_index(f.spec.aux),
            f.seed.to_string(),
            config_hash.to_string(),
            f.reason.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

// ---------------------------------------------------------------------------
// Fits
// ---------------------------------------------------------------------------

pub const FIT_COLUMNS: [&str; 15] = [
    "task_id",
    "stage",
    "aux_task_id",
    "family",
    "a_i",
    "a_ij",
    "a_sigma",
    "b",
    "c",
    "alpha",
    "n_scale",
    "freeze",
    "sse",
    "n_points",
    "converged",
];

/// One fitted curve as stored in a fits file.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub task: usize,
    pub stage: u8,
    pub aux: Option<usize>,
    pub fit: FitResult,
}

pub fn fit_rows(fit: &StagedFit) -> Vec<FitRow> {
    let mut rows = vec![
        FitRow {
            task: fit.target,
            stage: 1,
            aux: None,
            fit: fit.stage1,
        },
        FitRow {
            task: fit.target,
            stage: 2,
            aux: None,
            fit: fit.stage2,
        },
    ];
    rows.extend(fit.stage3.iter().map(|(&j, f)| FitRow {
        task: fit.target,
        stage: 3,
        aux: Some(j),
        fit: *f,
    }));
    rows
}

pub fn write_fits(path: &Path, rows: &[FitRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(FIT_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let p = &r.fit.params;
        w.write_record([
            r.task.to_string(),
            r.stage.to_string(),
            opt_index(r.aux),
            r.fit.family.name().to_string(),
            fmt_f64(p.a_i),
            fmt_f64(p.a_ij),
            fmt_f64(p.a_sigma),
            fmt_f64(p.b),
            fmt_f64(p.c),
            fmt_f64(p.alpha),
            fmt_f64(p.n_scale),
            p.freeze.to_string(),
            fmt_f64(r.fit.sse),
            r.fit.n_points.to_string(),
            u8::from(r.fit.converged).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn read_fits(path: &Path) -> Result<Vec<FitRow>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(FIT_COLUMNS.iter().copied()) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "unexpected fits header".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        let err = |col: usize| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: FIT_COLUMNS[col].to_string(),
            message: format!("bad value {:?}", rec.get(col).unwrap_or("")),
        };
        let f = |c: usize| rec[c].parse::<f64>().map_err(|_| err(c));
        let params = ParamSet {
            a_i: f(4)?,
            a_ij: f(5)?,
            a_sigma: f(6)?,
            b: f(7)?,
            c: f(8)?,
            alpha: f(9)?,
            n_scale: f(10)?,
            freeze: FreezeMask::parse_bits(&rec[11]).ok_or_else(|| err(11))?,
        };
        let aux = match rec[2].parse::<i64>() {
            Ok(-1) => None,
            Ok(v) if v >= 0 => Some(v as usize),
            _ => return Err(err(2)),
        };
        out.push(FitRow {
            task: rec[0].parse().map_err(|_| err(0))?,
            stage: rec[1].parse().map_err(|_| err(1))?,
            aux,
            fit: FitResult {
                family: CurveFamily::parse(&rec[3]).ok_or_else(|| err(3))?,
                params,
                sse: f(12)?,
                n_points: rec[13].parse().map_err(|_| err(13))?,
                converged: &rec[14] == "1",
                restarts_used: 0,
                excluded_points: 0,
            },
        });
    }
    Ok(out)
}

/// Rebuilds staged fits from stored rows. Targets missing stage 1 or 2 are
/// dropped.
pub fn staged_from_rows(rows: &[FitRow]) -> BTreeMap<usize, StagedFit> {
    let mut s1 = BTreeMap::new();
    let mut s2 = BTreeMap::new();
    let mut s3: BTreeMap<usize, BTreeMap<usize, FitResult>> = BTreeMap::new();
    for r in rows {
        match (r.stage, r.aux) {
            (1, _) => {
                s1.insert(r.task, r.fit);
            }
            (2, _) => {
                s2.insert(r.task, r.fit);
            }
            (3, Some(j)) => {
                s3.entry(r.task).or_default().insert(j, r.fit);
            }
            _ => {}
        }
    }
    s1.into_iter()
        .filter_map(|(t, f1)| {
            let f2 = *s2.get(&t)?;
            Some((
                t,
                StagedFit {
                    target: t,
                    stage1: f1,
                    stage2: f2,
                    stage3: s3.remove(&t).unwrap_or_default(),
                    stage3_failures: BTreeMap::new(),
                },
            ))
        })
        .collect()
}

/// Fit failures: `metric,task_id,stage,aux_task_id,reason`.
pub fn write_fit_failures(path: &Path, failures: &[(String, usize, u8, Option<usize>, FitError)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "task_id", "stage", "aux_task_id", "reason"])
        .map_err(|e| csv_err(path, e))?;
    for (metric, task, stage, aux, e) in failures {
        w.write_record([
            metric.clone(),
            task.to_string(),
            stage.to_string(),
            opt_index(*aux),
            e.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

// ---------------------------------------------------------------------------
// TAG
// ---------------------------------------------------------------------------

pub const TAG_COLUMNS: [&str; 6] = ["shift", "m", "source_task", "target_task", "mean_affinity", "n_records"];

pub fn write_tag(path: &Path, settings: &BTreeMap<(usize, usize), TagSummary>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TAG_COLUMNS).map_err(|e| csv_err(path, e))?;
    let nan_empty = |v: f64| if v.is_finite() { fmt_f64(v) } else { String::new() };
    for (&(shift, m), s) in settings {
        let k = s.k;
        for j in 0..k {
            for i in (0..k).filter(|&i| i != j) {
                w.write_record([
                    shift.to_string(),
                    m.to_string(),
                    j.to_string(),
                    i.to_string(),
                    nan_empty(s.mean[j * k + i]),
                    s.counts[j * k + i].to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        for i in 0..k {
            w.write_record([
                shift.to_string(),
                m.to_string(),
                "SIGMA".to_string(),
                i.to_string(),
                nan_empty(s.domain_mean[i]),
                s.domain_counts[i].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

/// Pairwise TAG matrices per `(shift, m)` read back from a TAG file, with
/// `NaN` where the mean is missing.
pub fn read_tag(path: &Path, k: usize) -> Result<BTreeMap<(usize, usize), Vec<f64>>> {
    let mut rdr = reader(path)?;
    let mut out: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        let err = |col: usize| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: TAG_COLUMNS[col].to_string(),
            message: format!("bad value {:?}", rec.get(col).unwrap_or("")),
        };
        if rec.len() != TAG_COLUMNS.len() {
            return Err(err(0));
        }
        if &rec[2] == "SIGMA" {
            continue;
        }
        let shift: usize = rec[0].parse().map_err(|_| err(0))?;
        let m: usize = rec[1].parse().map_err(|_| err(1))?;
        let j: usize = rec[2].parse().map_err(|_| err(2))?;
        let i: usize = rec[3].parse().map_err(|_| err(3))?;
        if i >= k || j >= k {
            return Err(err(3));
        }
        let v = if rec[4].is_empty() {
            f64::NAN
        } else {
            rec[4].parse().map_err(|_| err(4))?
        };
        out.entry((shift, m)).or_insert_with(|| vec![f64::NAN; k * k])[j * k + i] = v;
    }
    Ok(out)
}
