//! The JSON run configuration.
//!
//! One file drives every stage. Paths inside it are relative to the file's
//! directory. The configuration hash covers every setting that changes
//! results; `parallelism` is excluded.

use std::fs;
use std::path::{Path, PathBuf};

use mtlc_core::data::{Grouping, SynthConfig};
use mtlc_core::fitter::FitOptions;
use mtlc_core::hash::StableHasher;
use mtlc_core::learner::ModelConfig;
use mtlc_core::tag::TagConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Dataset CSV. When absent, `synth` must be given and the pipeline
    /// generates `dataset.csv` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    pub folds: FoldSection,
    pub grid: GridSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub tag: TagSection,
    /// Upper bound on worker threads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_rows: usize,
    pub d: usize,
    pub groups: Vec<Vec<usize>>,
    pub within_group_angle: f64,
    /// One rate for every task, or one per task.
    pub label_rate: Rates,
    #[serde(default)]
    pub mnar_strength: f64,
    pub noise_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_row_groups: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rates {
    All(f64),
    PerTask(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingName {
    Row,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSection {
    pub n_folds: usize,
    #[serde(default = "default_grouping")]
    pub grouping: GroupingName,
}

fn default_grouping() -> GroupingName {
    GroupingName::Row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub m_max: usize,
    pub shifts: Vec<usize>,
    #[serde(default = "ModelSection::stl")]
    pub stl_model: ModelSection,
    #[serde(default = "ModelSection::mtl")]
    pub mtl_model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_r() -> usize {
    ModelConfig::default().r
}

fn default_lr() -> f64 {
    ModelConfig::default().learning_rate
}

fn default_batch() -> usize {
    ModelConfig::default().batch_size
}

impl ModelSection {
    fn stl() -> Self {
        ModelSection {
            r: default_r(),
            learning_rate: default_lr(),
            epochs: 40,
            batch_size: default_batch(),
        }
    }

    fn mtl() -> Self {
        ModelSection {
            epochs: 100,
            ..Self::stl()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            r: self.r,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub starts: usize,
    pub perturbation: f64,
    pub max_iter: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let o = FitOptions::default();
        FitSection {
            starts: o.starts,
            perturbation: o.perturbation,
            max_iter: o.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSection {
    /// Defaults to the multi-task learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead_lr: Option<f64>,
    pub every: usize,
}

impl Default for TagSection {
    fn default() -> Self {
        TagSection {
            lookahead_lr: None,
            every: TagConfig::default().every,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.data.is_none() && self.synth.is_none() {
            return bad("data", "either data or synth is required");
        }
        if let Some(s) = &self.synth {
            self.synth_config_from(s)
                .validate()
                .map_err(|e| Error::Config(format!("synth: {e}")))?;
        }
        if self.folds.n_folds < 2 {
            return bad("folds.n_folds", "need at least two folds");
        }
        if self.grid.m_max == 0 || self.grid.m_max > self.folds.n_folds - 1 {
            return bad("grid.m_max", "must lie in 1..n_folds-1");
        }
        if self.grid.shifts.is_empty() || self.grid.shifts.iter().any(|&s| s >= self.folds.n_folds) {
            return bad("grid.shifts", "shifts must lie in 0..n_folds");
        }
        for (name, m) in [("grid.stl_model", &self.grid.stl_model), ("grid.mtl_model", &self.grid.mtl_model)] {
            m.model()
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.fit.starts == 0 {
            return bad("fit.starts", "must be positive");
        }
        if self.tag.every == 0 {
            return bad("tag.every", "must be positive");
        }
        if self.tag.lookahead_lr.is_some_and(|lr| !(lr >= 0.0) || !lr.is_finite()) {
            return bad("tag.lookahead_lr", "must be finite and non-negative");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism", "must be positive");
        }
        Ok(())
    }

    fn synth_config_from(&self, s: &SynthSection) -> SynthConfig {
        let k: usize = s.groups.iter().map(Vec::len).sum();
        SynthConfig {
            n_rows: s.n_rows,
            d: s.d,
            groups: s.groups.clone(),
            within_group_angle: s.within_group_angle,
            label_rate: match &s.label_rate {
                Rates::All(r) => vec![*r; k],
                Rates::PerTask(v) => v.clone(),
            },
            mnar_strength: s.mnar_strength,
            noise_sd: s.noise_sd,
            n_row_groups: s.n_row_groups,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        self.synth.as_ref().map(|s| self.synth_config_from(s))
    }

    pub fn grouping(&self) -> Grouping {
        match self.folds.grouping {
            GroupingName::Row => Grouping::Row,
            GroupingName::Group => Grouping::Group,
        }
    }

    pub fn fold_seed(&self) -> u64 {
        StableHasher::new().u64(self.seed).str("folds").finish()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            starts: self.fit.starts,
            perturbation: self.fit.perturbation,
            max_iter: self.fit.max_iter,
            seed: StableHasher::new().u64(self.seed).str("fit").finish(),
            ..FitOptions::default()
        }
    }

    pub fn tag_config(&self) -> TagConfig {
        TagConfig {
            lookahead_lr: self.tag.lookahead_lr,
            every: self.tag.every,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON of every
    /// result-relevant setting.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.parallelism = None;
        canonical.data = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
