//! Stages, the run manifest and pipeline composition.
//!
//! An output directory holds:
//!
//! | stage  | files |
//! |--------|-------|
//! | synth  | `dataset.csv`, `similarity.csv` |
//! | split  | `folds.csv` |
//! | grid   | `grid.csv`, `grid_failures.csv` |
//! | fit    | `fits_auroc.csv`, `fits_aupr.csv`, `fit_failures.csv` |
//! | tag    | `tag.csv`, `models/tag-s<shift>-m<m>.model` |
//! | report | `reports/<name>-<config hash>.{md,csv}` |
//!
//! plus one `manifest.json`. A stage is up to date when the manifest records
//! it under the current config hash, its outputs still have the recorded
//! digests and its inputs still have the recorded digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mtlc_core::data::{assign_folds, synth_generate, Dataset, FoldAssignment};
use mtlc_core::grid::{plan_grid, GridObservation, GridPlan, Metric};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::exec::{fit_all, run_grid, run_tag_sweep, GridOptions, GridRun};
use crate::io::{load_dataset, load_folds, save_dataset, save_folds, save_similarity, sha256_file, write_atomic};
use crate::reports::{build_all, ReportInputs};
use crate::tables::{
    fit_rows, read_fits, read_grid, read_tag, staged_from_rows, write_fit_failures, write_fits, write_grid_failures,
    write_tag, FitRow,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub command: String,
    pub config: Config,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// One invocation against an output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: Config,
    pub out: PathBuf,
    pub hash: String,
    pub parallelism: usize,
    pub command: String,
    manifest: Manifest,
}

/// What a stage did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
    /// The grid stopped early; downstream stages were not run.
    Partial,
}

impl Run {
    pub fn new(cfg: Config, out: &Path, parallelism: usize, command: &str) -> Result<Self> {
        let hash = cfg.hash();
        let started = now();
        let previous = Self::read_manifest(out)?;
        let stages = match previous {
            Some(m) => m.stages,
            None => BTreeMap::new(),
        };
        let manifest = Manifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash.clone(),
            master_seed: cfg.seed,
            command: command.to_string(),
            config: cfg.clone(),
            started_unix: started,
            finished_unix: started,
            stages,
        };
        Ok(Run {
            cfg,
            out: out.to_path_buf(),
            hash,
            parallelism: parallelism.max(1),
            command: command.to_string(),
            manifest,
        })
    }

    pub fn read_manifest(out: &Path) -> Result<Option<Manifest>> {
        let path = out.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| Error::Schema {
                path,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save_manifest(&mut self) -> Result<()> {
        self.manifest.finished_unix = now();
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.out.join(MANIFEST), format!("{json}\n").as_bytes())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.cfg.data.clone().unwrap_or_else(|| self.path("dataset.csv"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.rel(p), sha256_file(p)?)))
            .collect()
    }

    fn up_to_date(&self, stage: &str, inputs: &[PathBuf]) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        if rec.config_hash != self.hash {
            return false;
        }
        let outputs_ok = rec
            .outputs
            .iter()
            .all(|(p, d)| sha256_file(&self.out.join(p)).is_ok_and(|x| &x == d));
        outputs_ok && self.digests(inputs).is_ok_and(|d| d == rec.inputs)
    }

    fn record(&mut self, stage: &str, started: u64, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let rec = StageRecord {
            config_hash: self.hash.clone(),
            inputs: self.digests(inputs)?,
            outputs: self.digests(outputs)?,
            started_unix: started,
            finished_unix: now(),
        };
        self.manifest.stages.insert(stage.to_string(), rec);
        self.save_manifest()
    }

    fn forget(&mut self, stage: &str) -> Result<()> {
        self.manifest.stages.remove(stage);
        self.save_manifest()
    }

    // -----------------------------------------------------------------------
    // Loading stage inputs
    // -----------------------------------------------------------------------

    pub fn load_dataset(&self) -> Result<Dataset> {
        load_dataset(&self.dataset_path())
    }

    pub fn load_folds(&self, ds: &Dataset) -> Result<FoldAssignment> {
        load_folds(
            &self.path("folds.csv"),
            self.cfg.folds.n_folds,
            self.cfg.grouping(),
            ds.n_rows(),
        )
    }

    pub fn plan(&self, k: usize) -> Result<GridPlan> {
        let g = &self.cfg.grid;
        plan_grid(
            k,
            self.cfg.folds.n_folds,
            g.m_max,
            &g.shifts,
            self.cfg.seed,
            g.stl_model.model(),
            g.mtl_model.model(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_grid(&self) -> Result<Vec<GridObservation>> {
        let path = self.path("grid.csv");
        let obs = read_grid(&path, false)?;
        if let Some((_, h)) = obs.iter().find(|(_, h)| *h != self.hash) {
            return Err(Error::Schema {
                path,
                message: format!("grid rows carry config hash {h}, expected {}", self.hash),
            });
        }
        Ok(obs.into_iter().map(|(o, _)| o).collect())
    }

    pub fn fits_path(&self, metric: Metric) -> PathBuf {
        self.path(&format!("fits_{}.csv", metric.name()))
    }

    // -----------------------------------------------------------------------
    // Stages
    // -----------------------------------------------------------------------

    pub fn synth(&mut self) -> Result<()> {
        let started = now();
        let sc = self
            .cfg
            .synth_config()
            .ok_or_else(|| Error::Config("synth: section missing".into()))?;
        let out = synth_generate(&sc).map_err(|e| Error::Config(format!("synth: {e}")))?;
        let ds_path = self.path("dataset.csv");
        let sim_path = self.path("similarity.csv");
        save_dataset(&out.dataset, &ds_path)?;
        save_similarity(out.dataset.task_names(), &out.similarity, &sim_path)?;
        self.record("synth", started, &[], &[ds_path, sim_path])
    }

    pub fn split(&mut self) -> Result<()> {
        let started = now();
        let ds_path = self.dataset_path();
        let ds = load_dataset(&ds_path)?;
        let fa = assign_folds(&ds, self.cfg.folds.n_folds, self.cfg.grouping(), self.cfg.fold_seed())
            .map_err(|e| Error::Config(format!("folds: {e}")))?;
        let path = self.path("folds.csv");
        save_folds(&ds, &fa, &path)?;
        self.record("split", started, &[ds_path], &[path])
    }

    pub fn grid(&mut self, resume: bool, stop_after: Option<usize>) -> Result<GridRun> {
        let started = now();
        let ds_path = self.dataset_path();
        let ds = load_dataset(&ds_path)?;
        let folds = self.load_folds(&ds)?;
        let plan = self.plan(ds.n_tasks())?;
        let grid_path = self.path("grid.csv");
        let fail_path = self.path("grid_failures.csv");
        let run = run_grid(
            &plan,
            &ds,
            &folds,
            &grid_path,
            &self.hash,
            GridOptions {
                parallelism: self.parallelism,
                resume,
                stop_after,
            },
        )?;
        write_grid_failures(&fail_path, &run.failures, &self.hash)?;
        if run.complete {
            self.record("grid", started, &[ds_path, self.path("folds.csv")], &[grid_path, fail_path])?;
        } else {
            self.forget("grid")?;
        }
        Ok(run)
    }

    pub fn fit(&mut self) -> Result<()> {
        let started = now();
        let grid_path = self.path("grid.csv");
        let obs = self.load_grid()?;
        let k = task_count(&obs);
        let fits = fit_all(&obs, k, &self.cfg.fit_options(), self.parallelism)?;
        let mut outputs = Vec::new();
        let mut failures = Vec::new();
        for metric in Metric::ALL {
            let mf = fits.get(&metric).cloned().unwrap_or_default();
            let rows: Vec<FitRow> = mf.fits.values().flat_map(fit_rows).collect();
            let path = self.fits_path(metric);
            write_fits(&path, &rows)?;
            outputs.push(path);
            for (t, stage, aux, e) in mf.failures {
                failures.push((metric.name().to_string(), t, stage, aux, e));
            }
        }
        let fail_path = self.path("fit_failures.csv");
        write_fit_failures(&fail_path, &failures)?;
        outputs.push(fail_path);
        self.record("fit", started, &[grid_path], &outputs)
    }

    pub fn tag(&mut self) -> Result<()> {
        let started = now();
        let ds_path = self.dataset_path();
        let ds = load_dataset(&ds_path)?;
        let folds = self.load_folds(&ds)?;
        let plan = self.plan(ds.n_tasks())?;
        let sweep = run_tag_sweep(
            &plan,
            &ds,
            &folds,
            &self.cfg.grid.shifts,
            &self.cfg.tag_config(),
            self.parallelism,
        )?;
        let tag_path = self.path("tag.csv");
        write_tag(&tag_path, &sweep)?;
        let mut outputs = vec![tag_path];
        for (&(shift, m), s) in &sweep {
            let p = self.path(&format!("models/tag-s{shift}-m{m}.model"));
            checkpoint::save(&s.model, &p)?;
            outputs.push(p);
        }
        self.record("tag", started, &[ds_path, self.path("folds.csv")], &outputs)
    }

    fn report_inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.path("grid.csv")];
        v.extend(Metric::ALL.map(|m| self.fits_path(m)));
        v.push(self.path("tag.csv"));
        v
    }

    pub fn report(&mut self) -> Result<Vec<PathBuf>> {
        let started = now();
        let inputs = self.report_inputs();
        for p in &inputs {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
        }
        let obs = self.load_grid()?;
        let k = task_count(&obs);
        let mut fits = BTreeMap::new();
        for metric in Metric::ALL {
            fits.insert(metric, staged_from_rows(&read_fits(&self.fits_path(metric))?));
        }
        let tag = read_tag(&self.path("tag.csv"), k)?;
        let tables = build_all(&ReportInputs {
            k,
            observations: &obs,
            fits: &fits,
            tag: &tag,
            fit_options: self.cfg.fit_options(),
        })?;
        let dir = self.path("reports");
        let mut outputs = Vec::new();
        for t in &tables {
            outputs.extend(t.write(&dir, &self.hash)?);
        }
        self.record("report", started, &inputs, &outputs)?;
        Ok(outputs)
    }

    /// Runs every stage that is not up to date, in order. A stage also runs
    /// when one it depends on ran.
    pub fn pipeline(&mut self) -> Result<Vec<(&'static str, Status)>> {
        let mut status = StageStatus::default();
        let ran = |status: &StageStatus, s: &str| status.get(s) == Some(Status::Ran);

        if self.cfg.data.is_none() {
            let st = if self.up_to_date("synth", &[]) {
                Status::UpToDate
            } else {
                self.synth().map_err(|e| e.in_stage("synth"))?;
                Status::Ran
            };
            status.insert("synth", st);
        }
        let ds_path = self.dataset_path();
        if !ds_path.exists() {
            return Err(Error::MissingInput(ds_path).in_stage("split"));
        }
        let folds = self.path("folds.csv");

        let st = if !ran(&status, "synth") && self.up_to_date("split", &[ds_path.clone()]) {
            Status::UpToDate
        } else {
            self.split().map_err(|e| e.in_stage("split"))?;
            Status::Ran
        };
        status.insert("split", st);

        let upstream = ran(&status, "synth") || ran(&status, "split");
        let st = if !upstream && self.up_to_date("grid", &[ds_path.clone(), folds.clone()]) {
            Status::UpToDate
        } else {
            // Pick up where an interrupted grid left off; rows from another
            // configuration are dropped by the hash check.
            let run = self.grid(!upstream, None).map_err(|e| e.in_stage("grid"))?;
            if run.complete {
                Status::Ran
            } else {
                Status::Partial
            }
        };
        status.insert("grid", st);
        if st == Status::Partial {
            return Ok(status.0);
        }

        let st = if !ran(&status, "grid") && self.up_to_date("fit", &[self.path("grid.csv")]) {
            Status::UpToDate
        } else {
            self.fit().map_err(|e| e.in_stage("fit"))?;
            Status::Ran
        };
        status.insert("fit", st);

        let st = if !upstream && self.up_to_date("tag", &[ds_path.clone(), folds.clone()]) {
            Status::UpToDate
        } else {
            self.tag().map_err(|e| e.in_stage("tag"))?;
            Status::Ran
        };
        status.insert("tag", st);

        let any_ran = ["grid", "fit", "tag"].iter().any(|s| ran(&status, s));
        let st = if !any_ran && self.up_to_date("report", &self.report_inputs()) {
            Status::UpToDate
        } else {
            self.report().map_err(|e| e.in_stage("report"))?;
            Status::Ran
        };
        status.insert("report", st);
        self.save_manifest()?;
        Ok(status.0)
    }
}

#[derive(Default)]
struct StageStatus(Vec<(&'static str, Status)>);

impl StageStatus {
    fn insert(&mut self, stage: &'static str, s: Status) {
        self.0.push((stage, s));
    }

    fn get(&self, stage: &str) -> Option<Status> {
        self.0.iter().find(|(n, _)| *n == stage).map(|(_, s)| *s)
    }
}

/// Number of tasks seen in grid observations.
pub fn task_count(obs: &[GridObservation]) -> usize {
    obs.iter()
        .flat_map(|o| o.records.iter().map(|r| r.task + 1))
        .max()
        .unwrap_or(0)
}
