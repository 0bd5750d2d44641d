//! Report tables, each written as Markdown plus a CSV twin named
//! `<name>-<config hash>.{md,csv}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mtlc_core::curves::{CurveArgs, CurveFamily};
use mtlc_core::fitter::{fit_family, select_family, FitOptions, FitPoint, SelectionTable, StagedFit};
use mtlc_core::grid::{average_over_shifts, fit_inputs, AveragedRecord, GridKind, GridObservation, Metric};
use mtlc_core::report::{
    decomposition, gain_forecast, stl_vs_mtl, tag_vs_mtlc, CorrCell, DecompositionRow, ForecastInput,
    ForecastRow, StlMtlInput, StlVsMtl, TagMatrices, TagVsMtlc,
};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};

pub const SELECTION_FAMILIES: [CurveFamily; 3] = [CurveFamily::Exp4, CurveFamily::Exp3_1, CurveFamily::Ilog2];

/// A rendered report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Markdown cells, when they differ from the CSV cells.
    pub md_rows: Option<Vec<Vec<String>>>,
    pub notes: Vec<String>,
}

impl Table {
    fn new(name: &str, title: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            md_rows: None,
            notes: Vec::new(),
        }
    }

    fn push(&mut self, csv: Vec<String>, md: Vec<String>) {
        self.rows.push(csv);
        self.md_rows.get_or_insert_with(Vec::new).push(md);
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let bad = |e: csv::Error| Error::Numerical(format!("report {}: {e}", self.name));
        w.write_record(&self.header).map_err(bad)?;
        for r in &self.rows {
            w.write_record(r).map_err(bad)?;
        }
        w.into_inner().map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn markdown(&self, config_hash: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}\n", self.title);
        let _ = writeln!(s, "Config hash `{config_hash}`.\n");
        let _ = writeln!(s, "| {} |", self.header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(self.header.len()));
        for r in self.md_rows.as_ref().unwrap_or(&self.rows) {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        if !self.notes.is_empty() {
            s.push('\n');
            for n in &self.notes {
                let _ = writeln!(s, "{n}");
            }
        }
        s
    }

    /// Writes both files and returns their paths.
    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<[PathBuf; 2]> {
        let md = dir.join(format!("{}-{config_hash}.md", self.name));
        let csv = dir.join(format!("{}-{config_hash}.csv", self.name));
        write_atomic(&md, self.markdown(config_hash).as_bytes())?;
        write_atomic(&csv, &self.csv()?)?;
        Ok([md, csv])
    }
}

fn md4(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

fn sci(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.3e}")
    }
}

fn corr_cells(cell: &CorrCell) -> (Vec<String>, Vec<String>) {
    match cell {
        CorrCell::Value(c) => (
            vec![fmt_f64(c.r), fmt_f64(c.p), c.n.to_string(), "value".into()],
            vec![md4(c.r), sci(c.p), c.n.to_string(), "value".into()],
        ),
        CorrCell::Degenerate { n } => (
            vec![String::new(), String::new(), n.to_string(), "degenerate".into()],
            vec!["-".into(), "-".into(), n.to_string(), "degenerate".into()],
        ),
        CorrCell::Insufficient { n } => (
            vec![String::new(), String::new(), n.to_string(), "insufficient".into()],
            vec!["-".into(), "-".into(), n.to_string(), "insufficient".into()],
        ),
    }
}

// ---------------------------------------------------------------------------
// Inputs derived from the grid
// ---------------------------------------------------------------------------

/// Shift-averaged records of each shift on its own.
fn records_by_shift(observations: &[GridObservation]) -> Result<BTreeMap<usize, Vec<AveragedRecord>>> {
    let mut by: BTreeMap<usize, Vec<GridObservation>> = BTreeMap::new();
    for o in observations {
        by.entry(o.spec.shift).or_default().push(o.clone());
    }
    by.into_iter()
        .map(|(s, obs)| {
            average_over_shifts(&obs)
                .map(|r| (s, r))
                .map_err(|e| Error::Numerical(e.to_string()))
        })
        .collect()
}

/// Family comparison per metric on single-task points.
pub fn family_selection(
    observations: &[GridObservation],
    k: usize,
    opts: &FitOptions,
) -> Result<BTreeMap<Metric, SelectionTable>> {
    let by_shift = records_by_shift(observations)?;
    let mut out = BTreeMap::new();
    for metric in Metric::ALL {
        let mut points: BTreeMap<usize, BTreeMap<usize, Vec<FitPoint>>> = BTreeMap::new();
        for (&s, records) in &by_shift {
            for t in 0..k {
                let stl = fit_inputs(records, t, metric).stl;
                if !stl.is_empty() {
                    points.entry(t).or_default().insert(s, stl);
                }
            }
        }
        let o = opts.derive(&[metric as u64, 0x5e1]);
        out.insert(metric, select_family(&points, &SELECTION_FAMILIES, &o));
    }
    Ok(out)
}

/// Largest fold count with a defined averaged record of `kind` for `task`,
/// and the metric there.
fn value_at_max(records: &[AveragedRecord], kind: GridKind, task: usize, metric: Metric) -> Option<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.key.kind == kind && r.task == task && r.defined)
        .filter_map(|r| metric.of(r).map(|v| (r.key.m, v)))
        .max_by_key(|&(m, _)| m)
}

pub fn stl_mtl_inputs(
    records: &[AveragedRecord],
    k: usize,
    opts: &FitOptions,
) -> BTreeMap<Metric, Vec<StlMtlInput>> {
    let mut out = BTreeMap::new();
    for metric in Metric::ALL {
        let mut rows = Vec::new();
        for t in 0..k {
            let inputs = fit_inputs(records, t, metric);
            let mtl_single: Vec<FitPoint> = inputs
                .mtl
                .iter()
                .map(|p| FitPoint::new(CurveArgs::single(p.args.n_t), p.value, p.fold_count))
                .collect();
            let o = opts.derive(&[metric as u64, t as u64, 0x57]);
            let (Ok(st), Ok(mt)) = (
                fit_family(&inputs.stl, CurveFamily::Exp3_1, &o),
                fit_family(&mtl_single, CurveFamily::Exp3_1, &o),
            ) else {
                continue;
            };
            let (Some((_, st_value)), Some((_, mt_value))) = (
                value_at_max(records, GridKind::Stl, t, metric),
                value_at_max(records, GridKind::Mtl, t, metric),
            ) else {
                continue;
            };
            rows.push(StlMtlInput {
                task: t,
                st,
                mt,
                st_value,
                mt_value,
            });
        }
        out.insert(metric, rows);
    }
    out
}

/// Forecast inputs at the largest multi-task fold count. Without a budget,
/// each task is offered one more fold's worth of its labels.
pub fn forecast_inputs(
    records: &[AveragedRecord],
    fits: &BTreeMap<usize, StagedFit>,
    budget: Option<f64>,
) -> Vec<ForecastInput> {
    let mut out = Vec::new();
    for (&t, fit) in fits {
        let at = records
            .iter()
            .filter(|r| r.key.kind == GridKind::Mtl && r.task == t && r.defined)
            .max_by_key(|r| r.key.m);
        let Some(r) = at else { continue };
        out.push(ForecastInput {
            task: t,
            fit: fit.stage2,
            n_t: r.n_t,
            n_sigma: r.n_sigma,
            budget: budget.unwrap_or(r.n_t / r.key.m as f64),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

pub fn family_selection_table(sel: &BTreeMap<Metric, SelectionTable>) -> Table {
    let mut t = Table::new(
        "family_selection",
        "Curve family selection",
        &[
            "metric",
            "family",
            "l2",
            "e_l2",
            "preq",
            "e_preq",
            "excluded_l2",
            "excluded_e_l2",
            "excluded_preq",
            "excluded_e_preq",
            "tasks",
        ],
    );
    for (metric, table) in sel {
        for r in &table.rows {
            let ex = r.excluded.map(|e| e.to_string());
            let mut csv = vec![
                metric.name().to_string(),
                r.family.name().to_string(),
                fmt_f64(r.l2),
                fmt_f64(r.e_l2),
                fmt_f64(r.preq),
                fmt_f64(r.e_preq),
            ];
            csv.extend(ex.iter().cloned());
            csv.push(r.tasks.to_string());
            let mut md = vec![
                metric.name().to_string(),
                r.family.name().to_string(),
                sci(r.l2),
                sci(r.e_l2),
                sci(r.preq),
                sci(r.e_preq),
            ];
            md.extend(ex);
            md.push(r.tasks.to_string());
            t.push(csv, md);
        }
    }
    t.notes.push(
        "l2 and preq are means over shifts of per-shift task means; e_l2 and e_preq use shift-averaged points."
            .into(),
    );
    t
}

pub fn stl_vs_mtl_tables(s: &StlVsMtl) -> [Table; 2] {
    let mut t = Table::new(
        "stl_vs_mtl",
        "Single-task versus multi-task curves: Spearman of coefficient change against metric change",
        &["coefficient", "metric", "rho", "p", "n", "status"],
    );
    for (&(c, m), cell) in &s.table {
        let (csv, md) = corr_cells(cell);
        let mut row = vec![c.name().to_string(), m.name().to_string()];
        let mut mdrow = row.clone();
        row.extend(csv);
        mdrow.extend(md);
        t.push(row, mdrow);
    }
    let mut sc = Table::new(
        "stl_vs_mtl_scatter",
        "Single-task and multi-task curve coefficients per task",
        &["metric", "task", "a_st", "b_st", "c_st", "a_mt", "b_mt", "c_mt", "value_st", "value_mt"],
    );
    for r in &s.scatter {
        let mut row = vec![r.metric.name().to_string(), r.task.to_string()];
        row.extend(r.st.iter().chain(&r.mt).map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.st_value));
        row.push(fmt_f64(r.mt_value));
        let mut md = vec![r.metric.name().to_string(), r.task.to_string()];
        md.extend(r.st.iter().chain(&r.mt).map(|&v| md4(v)));
        md.push(md4(r.st_value));
        md.push(md4(r.mt_value));
        sc.push(row, md);
    }
    [t, sc]
}

pub fn decomposition_table(rows: &BTreeMap<Metric, Vec<DecompositionRow>>) -> Table {
    let mut t = Table::new(
        "decomposition",
        "Transfer decomposition per target and auxiliary task",
        &[
            "metric",
            "target_task",
            "aux_task",
            "a_i",
            "a_sigma",
            "a_ij",
            "b_i_sigma",
            "b_ij",
            "delta_b",
            "c_i_sigma",
            "c_ij",
            "delta_c",
        ],
    );
    for (m, rs) in rows {
        for r in rs {
            let vals = [
                r.a_i,
                r.a_sigma,
                r.a_ij,
                r.b_i_sigma,
                r.b_ij,
                r.delta_b(),
                r.c_i_sigma,
                r.c_ij,
                r.delta_c(),
            ];
            let head = vec![m.name().to_string(), r.target.to_string(), r.aux.to_string()];
            let mut csv = head.clone();
            csv.extend(vals.iter().map(|&v| fmt_f64(v)));
            let mut md = head;
            md.extend(vals.iter().map(|&v| md4(v)));
            t.push(csv, md);
        }
    }
    t
}

pub fn tag_vs_mtlc_table(s: &TagVsMtlc) -> Table {
    let mut t = Table::new(
        "tag_vs_mtlc",
        "TAG affinity versus transfer coefficients: Spearman correlation",
        &["coefficient", "metric", "variant", "rho", "p", "n", "status"],
    );
    for (&(c, m, v), cell) in &s.table {
        let (csv, md) = corr_cells(cell);
        let head = vec![c.name().to_string(), m.name().to_string(), v.name().to_string()];
        let mut row = head.clone();
        row.extend(csv);
        let mut mdrow = head;
        mdrow.extend(md);
        t.push(row, mdrow);
    }
    t.notes.push("a is a_ij; b and c are the stage-3 minus stage-2 differences.".into());
    t
}

pub fn forecast_table(rows: &BTreeMap<Metric, (Vec<ForecastRow>, Vec<usize>)>) -> Table {
    let mut t = Table::new(
        "gain_forecast",
        "Forecast gain of extra labels per task",
        &["metric", "rank", "task", "n_t", "n_sigma", "current", "budget", "gain", "gain_per_label"],
    );
    for (m, (rs, omitted)) in rows {
        for r in rs {
            let head = vec![m.name().to_string(), r.rank.to_string(), r.task.to_string()];
            let vals = [r.n_t, r.n_sigma, r.current, r.budget, r.gain, r.gain_per_label];
            let mut csv = head.clone();
            csv.extend(vals.iter().map(|&v| fmt_f64(v)));
            let mut md = head;
            md.extend([
                md4(r.n_t),
                md4(r.n_sigma),
                md4(r.current),
                md4(r.budget),
                sci(r.gain),
                sci(r.gain_per_label),
            ]);
            t.push(csv, md);
        }
        if !omitted.is_empty() {
            let ids: Vec<String> = omitted.iter().map(usize::to_string).collect();
            t.notes.push(format!("{}: no forecast for tasks {}", m.name(), ids.join(", ")));
        }
    }
    t
}

/// Everything the report stage reads.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub k: usize,
    pub observations: &'a [GridObservation],
    pub fits: &'a BTreeMap<Metric, BTreeMap<usize, StagedFit>>,
    pub tag: &'a TagMatrices,
    pub fit_options: FitOptions,
}

/// Builds every report table.
pub fn build_all(inp: &ReportInputs<'_>) -> Result<Vec<Table>> {
    let records = average_over_shifts(inp.observations).map_err(|e| Error::Numerical(e.to_string()))?;
    let selection = family_selection(inp.observations, inp.k, &inp.fit_options)?;
    let svm = stl_vs_mtl(&stl_mtl_inputs(&records, inp.k, &inp.fit_options));
    let decomp: BTreeMap<Metric, Vec<DecompositionRow>> =
        inp.fits.iter().map(|(&m, f)| (m, decomposition(f))).collect();
    let tag = tag_vs_mtlc(inp.k, inp.tag, &decomp);
    let forecasts = forecasts(&records, inp.fits, None);

    let [svm_t, scatter] = stl_vs_mtl_tables(&svm);
    Ok(vec![
        family_selection_table(&selection),
        svm_t,
        scatter,
        decomposition_table(&decomp),
        tag_vs_mtlc_table(&tag),
        forecast_table(&forecasts),
    ])
}

pub fn forecasts(
    records: &[AveragedRecord],
    fits: &BTreeMap<Metric, BTreeMap<usize, StagedFit>>,
    budget: Option<f64>,
) -> BTreeMap<Metric, (Vec<ForecastRow>, Vec<usize>)> {
    fits.iter()
        .map(|(&m, f)| (m, gain_forecast(&forecast_inputs(records, f, budget))))
        .collect()
}
