use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{CycleConfig, Exploration, DEFAULT_LAMBDA};
use crate::domain::{ArmBinning, EligibilityConfig};
use crate::evaluation::{DEFAULT_ALPHA, DEFAULT_RESAMPLES};
use crate::patient_state::{DwellChangeRule, SubgroupThresholds};

use super::events::EngineSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("environment variable {name}: cannot parse {value:?}")]
    Env { name: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Directory holding the event logs and snapshots. `None` keeps
    /// everything in memory.
    pub data_dir: Option<PathBuf>,
    pub lambda: f64,
    /// Exploration bonus weight for new enrollments.
    pub exploration_alpha: f64,
    /// Significance level for the per-metric tests on the dashboard.
    pub alpha_level: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub dwell_rule: DwellChangeRule,
    pub subgroups: SubgroupThresholds,
    pub eligibility: EligibilityConfig,
    pub cycle: CycleConfig,
    pub binning: ArmBinning,
    pub baseline_reports: usize,
    pub expiry_hours: i64,
    /// Write a snapshot after this many events per patient; 0 disables.
    pub snapshot_every: u64,
    /// Path to a state model JSON; the reference centroids otherwise.
    pub state_model: Option<PathBuf>,
    /// Require `x-role: clinician` on dashboard requests.
    pub require_clinician_header: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".to_owned(),
            port: 8080,
            data_dir: None,
            lambda: DEFAULT_LAMBDA,
            exploration_alpha: 0.0,
            alpha_level: DEFAULT_ALPHA,
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            dwell_rule: DwellChangeRule::default(),
            subgroups: SubgroupThresholds::default(),
            eligibility: EligibilityConfig::default(),
            cycle: CycleConfig::default(),
            binning: ArmBinning::default(),
            baseline_reports: 14,
            expiry_hours: 48,
            snapshot_every: 100,
            state_model: None,
            require_clinician_header: false,
        }
    }
}

fn env_parse<T: std::str::FromStr>(
    get: &impl Fn(&str) -> Option<String>,
    name: &str,
    slot: &mut T,
) -> Result<(), ConfigError> {
    if let Some(value) = get(name) {
        *slot = value.parse().map_err(|_| ConfigError::Env {
            name: name.to_owned(),
            value,
        })?;
    }
    Ok(())
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Applies `SCSREC_*` overrides read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        env_parse(&get, "SCSREC_BIND", &mut self.bind)?;
        env_parse(&get, "SCSREC_PORT", &mut self.port)?;
        if let Some(dir) = get("SCSREC_DATA_DIR") {
            self.data_dir = Some(dir.into());
        }
        env_parse(&get, "SCSREC_LAMBDA", &mut self.lambda)?;
        env_parse(&get, "SCSREC_EXPLORATION_ALPHA", &mut self.exploration_alpha)?;
        env_parse(&get, "SCSREC_ALPHA_LEVEL", &mut self.alpha_level)?;
        env_parse(&get, "SCSREC_RESAMPLES", &mut self.n_resamples)?;
        env_parse(&get, "SCSREC_DWELL_THRESHOLD", &mut self.dwell_rule.threshold)?;
        env_parse(&get, "SCSREC_ACTIVE_MONITORING", &mut self.subgroups.monitoring)?;
        env_parse(&get, "SCSREC_FOLLOW_UP", &mut self.subgroups.follow_up)?;
        env_parse(&get, "SCSREC_EXPIRY_HOURS", &mut self.expiry_hours)?;
        env_parse(&get, "SCSREC_SNAPSHOT_EVERY", &mut self.snapshot_every)?;
        if let Some(p) = get("SCSREC_STATE_MODEL") {
            self.state_model = Some(p.into());
        }
        Ok(())
    }

    /// File (if given) then environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn engine(&self) -> EngineSettings {
        EngineSettings {
            lambda: self.lambda,
            exploration: Exploration {
                alpha: self.exploration_alpha,
            },
            cycle: self.cycle,
            baseline_reports: self.baseline_reports,
            expiry_hours: self.expiry_hours,
            eligibility: self.eligibility,
        }
    }
}
