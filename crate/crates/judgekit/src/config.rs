//! Run configuration: endpoint settings, calibration and training knobs,
//! and policy parameters, loaded from one JSON file. Every command writes
//! the resolved config next to its outputs so runs are replayable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{BinningMode, DEFAULT_ALPHA_STEP};
use crate::error::{Error, Result};
use crate::gateway::EndpointConfig;
use crate::judge::JudgeTrainConfig;
use crate::selective::RefineTemplates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(default = "default_alpha_step")]
    pub alpha_step: f64,
    #[serde(default)]
    pub binning: BinningMode,
}

fn default_alpha_step() -> f64 {
    DEFAULT_ALPHA_STEP
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            alpha_step: DEFAULT_ALPHA_STEP,
            binning: BinningMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    /// Accept threshold for selection and refinement gating.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Pool size for best-of-N sampling.
    #[serde(default = "default_best_of_n")]
    pub best_of_n: usize,
    /// Extra samples per record for the sampling-variance baseline.
    #[serde(default = "default_vro_extra_samples")]
    pub vro_extra_samples: usize,
}

fn default_threshold() -> f64 {
    4.5
}
fn default_best_of_n() -> usize {
    8
}
fn default_vro_extra_samples() -> usize {
    3
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            threshold: default_threshold(),
            best_of_n: default_best_of_n(),
            vro_extra_samples: default_vro_extra_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: EndpointConfig,
    pub evaluator: EndpointConfig,
    pub embedder: EndpointConfig,
    #[serde(default = "default_samples_per_instruction")]
    pub samples_per_instruction: usize,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub judge: JudgeTrainConfig,
    #[serde(default)]
    pub policy: PolicySettings,
    #[serde(default)]
    pub templates: RefineTemplates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples_per_instruction() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate("generator")?;
        self.evaluator.validate("evaluator")?;
        self.embedder.validate("embedder")?;
        if self.samples_per_instruction == 0 {
            return Err(Error::Config("samples_per_instruction must be >= 1".into()));
        }
        if !(self.calibration.alpha_step > 0.0 && self.calibration.alpha_step <= 1.0) {
            return Err(Error::Config(format!(
                "calibration.alpha_step = {} must be in (0, 1]",
                self.calibration.alpha_step
            )));
        }
        self.judge.validate()?;
        if !self.policy.threshold.is_finite() {
            return Err(Error::Config(format!(
                "policy.threshold = {} must be finite",
                self.policy.threshold
            )));
        }
        if self.policy.best_of_n == 0 {
            return Err(Error::Config("policy.best_of_n must be >= 1".into()));
        }
        if self.policy.vro_extra_samples == 0 {
            return Err(Error::Config(
                "policy.vro_extra_samples must be >= 1".into(),
            ));
        }
        self.templates.validate()?;
        Ok(())
    }

    /// Config pointing every endpoint at the deterministic mock backend.
    pub fn mock() -> RunConfig {
        RunConfig {
            generator: EndpointConfig::mock("mock-gen", 0.7),
            evaluator: EndpointConfig::mock("mock-eval", 0.0),
            embedder: EndpointConfig::mock("mock-embed", 0.0),
            samples_per_instruction: 1,
            calibration: CalibrationSettings::default(),
            judge: JudgeTrainConfig::default(),
            policy: PolicySettings::default(),
            templates: RefineTemplates::default(),
            cache_root: None,
            output_dir: None,
            seed: 0,
        }
    }
}
