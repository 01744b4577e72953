//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FederationConfig, StrategyConfig, TrainingParadigm};
use crate::metrics::MetricConfig;
use crate::model::UNetConfig;
use crate::phantom::CentreSpec;
use crate::preprocess::PreprocessConfig;
use crate::slicing::AugmentPipeline;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDSCT_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Client Adam learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub augment: AugmentPipeline,
    /// Validation patients scored per client each round; `None` means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_validation_patients: Option<usize>,
    /// Unseen-centre patients scored each round; `None` means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_unseen_patients: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            batch_size: 32,
            augment: AugmentPipeline::Minimal,
            max_validation_patients: None,
            max_unseen_patients: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub federation: FederationConfig,
    pub centres: Vec<CentreSpec>,
    pub unseen: CentreSpec,
    pub preprocess: PreprocessConfig,
    pub model: UNetConfig,
    pub paradigm: TrainingParadigm,
    pub training: TrainingConfig,
    pub metrics: MetricConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Full-size settings: 256³ volumes, the 34-convolution network and
    /// 30 rounds of FedAvg+FedProx.
    pub fn paper() -> Self {
        let centre = |id: &str| CentreSpec {
            fov_mm: 256.0,
            ..CentreSpec::preset(id).expect("preset")
        };
        ExperimentConfig {
            seed: 0,
            federation: FederationConfig::default(),
            centres: ["A", "B", "C", "D"].map(centre).to_vec(),
            unseen: centre("E"),
            preprocess: PreprocessConfig::for_target(256),
            model: UNetConfig::paper(),
            paradigm: TrainingParadigm::RandomMulti2D,
            training: TrainingConfig::default(),
            metrics: MetricConfig::default(),
            output_dir: PathBuf::from("runs/paper"),
        }
    }

    /// Desk-scale settings: 64³ volumes, tiny network, 10 rounds.
    pub fn desk() -> Self {
        let centre = |id: &str| CentreSpec::preset(id).expect("preset");
        ExperimentConfig {
            seed: 0,
            federation: FederationConfig {
                rounds: 10,
                ..FederationConfig::default()
            },
            centres: ["A", "B", "C", "D"].map(centre).to_vec(),
            unseen: centre("E"),
            preprocess: PreprocessConfig::for_target(64),
            model: UNetConfig::tiny(64),
            paradigm: TrainingParadigm::RandomMulti2D,
            training: TrainingConfig {
                lr: 2e-3,
                batch_size: 8,
                max_validation_patients: Some(1),
                max_unseen_patients: Some(2),
                ..TrainingConfig::default()
            },
            metrics: MetricConfig::default(),
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn with_strategy(mut self, strategy: StrategyConfig) -> Self {
        self.federation.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.centres.len() != self.federation.clients {
            return Err(Error::config(
                "federation.clients",
                format!("{} clients but {} centres listed", self.federation.clients, self.centres.len()),
            ));
        }
        let mut ids: Vec<&str> = self.centres.iter().map(|c| c.centre_id.as_str()).collect();
        ids.push(&self.unseen.centre_id);
        for c in self.centres.iter().chain(std::iter::once(&self.unseen)) {
            c.validate()?;
        }
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::config("centres", "centre ids must be unique, including the unseen centre"));
        }
        self.preprocess.validate()?;
        self.model.validate()?;
        self.metrics.validate()?;
        let want = self.paradigm.model_input_size(self.preprocess.target_dim);
        if let TrainingParadigm::Patches2D {
            patch_size,
            patches_per_slice,
        } = self.paradigm
        {
            if patch_size == 0 || patch_size > self.preprocess.target_dim {
                return Err(Error::config(
                    "paradigm.patch_size",
                    format!("must lie in 1..={}", self.preprocess.target_dim),
                ));
            }
            if patches_per_slice == 0 {
                return Err(Error::config("paradigm.patches_per_slice", "must be at least 1"));
            }
        }
        if self.model.input_size != want {
            return Err(Error::config(
                "model.input_size",
                format!("{} does not match the {want}-pixel training inputs", self.model.input_size),
            ));
        }
        if !(self.training.lr.is_finite() && self.training.lr > 0.0) {
            return Err(Error::config("training.lr", "must be finite and > 0"));
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let reason = e.message().to_string();
            let field = e
                .span()
                .map(|s| format!("at byte {}", s.start))
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parse and validate `path`, then apply the output-directory override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("{}: {field}", path.display()),
                reason,
            },
            other => other,
        })?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }
}
