//! Project configuration file.
//!
//! Relative paths are resolved against the directory holding the config file.
//!
//! ```toml
//! workers = 0                 # 0 = all cores
//!
//! [paths]
//! schema = "schema.toml"
//! data = "cases.csv"
//! model_store = "models"
//! registry = "registry.json"
//! reports = "reports"
//!
//! [forest]
//! n_trees = 200
//! master_seed = 42
//!
//! [importance]
//! repeats = 10
//! mode = "oob"
//! seed = 7
//! stability_seeds = 10
//!
//! [derivation]
//! min_stability = 0.8
//!
//! [monitor]
//! rho_threshold = 0.7
//!
//! [[macro_kpi]]
//! id = "processing_time"
//! name = "Case processing time"
//! target_column = "days"
//! direction = "minimize"
//! ```

use std::path::{Path, PathBuf};

use kpiforge::forest::{ForestParams, Workers};
use kpiforge::importance::{EvaluationMode, PermutationSettings};
use kpiforge::kpi::{DerivationThresholds, MacroKpi};
use kpiforge::monitor::{BootstrapSettings, DEFAULT_RHO_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model_store: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub repeats: usize,
    pub mode: EvaluationMode,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Seeded refits for stability selection; fewer than 2 skips it.
    pub stability_seeds: usize,
    /// Top-k used when counting stability hits; defaults to `min(p, 5)`.
    pub stability_top_k: Option<usize>,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            mode: EvaluationMode::Oob,
            seed: 0,
            holdout_fraction: 0.25,
            stability_seeds: 10,
            stability_top_k: None,
        }
    }
}

impl ImportanceConfig {
    pub fn permutation(&self) -> PermutationSettings {
        PermutationSettings {
            repeats: self.repeats,
            seed: self.seed,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub rho_threshold: f64,
    /// Defaults to the number of confirmed micro-KPI features in the registry.
    pub top_k: Option<usize>,
    pub bootstrap: BootstrapSettings,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            rho_threshold: DEFAULT_RHO_THRESHOLD,
            top_k: None,
            bootstrap: BootstrapSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Worker threads for training and importance; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub forest: ForestParams,
    pub importance: ImportanceConfig,
    pub derivation: DerivationThresholds,
    pub monitor: MonitorConfig,
    #[serde(rename = "macro_kpi")]
    pub macro_kpis: Vec<MacroKpi>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl ProjectConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut config: ProjectConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {}", e.message())))?;
        config.base_dir = base_dir.to_owned();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    /// A config with defaults only, resolving paths against `base_dir`.
    pub fn empty(base_dir: &Path) -> Self {
        Self {
            base_dir: base_dir.to_owned(),
            ..Default::default()
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_owned()
        } else {
            self.base_dir.join(path)
        }
    }

    fn required(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| CliError::config(format!("paths.{key} is not set")))
    }

    pub fn schema_path(&self) -> Result<PathBuf, CliError> {
        self.required(&self.paths.schema, "schema")
    }

    pub fn data_path(&self, overridden: Option<&Path>) -> Result<PathBuf, CliError> {
        match overridden {
            Some(p) => Ok(p.to_owned()),
            None => self.required(&self.paths.data, "data"),
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.resolve(self.paths.model_store.as_deref().unwrap_or(Path::new("models")))
            .join("model.json")
    }

    pub fn registry_path(&self) -> PathBuf {
        self.resolve(self.paths.registry.as_deref().unwrap_or(Path::new("registry.json")))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(self.paths.reports.as_deref().unwrap_or(Path::new("reports")))
    }

    pub fn workers(&self) -> Workers {
        match self.workers {
            0 => Workers::Available,
            n => Workers::Fixed(n),
        }
    }

    pub fn macro_kpi(&self, id: &str) -> Option<&MacroKpi> {
        self.macro_kpis.iter().find(|m| m.id == id)
    }

    pub fn bootstrap(&self) -> BootstrapSettings {
        self.monitor.bootstrap
    }
}
