//! Run configuration: one strictly validated JSON document for all stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptConfig, InitMode};
use crate::codebook::CodebookConfig;
use crate::error::{Result, XpqError};
use crate::mapping::DEFAULT_COVERING_TARGET;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ks: Vec<usize>,
    pub tasks: usize,
    pub modes: Vec<InitMode>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ks: vec![4, 16, 64],
            tasks: 20,
            modes: vec![InitMode::CodebookInit, InitMode::RandomInit],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub covering_target: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            covering_target: DEFAULT_COVERING_TARGET,
            top_k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every stage seed.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub codebook: CodebookConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub experiment: ExperimentConfig,
    pub mapping: MappingConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| XpqError::json(origin, e))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| XpqError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Push the top-level seed into every stage.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
            self.experiment.seed = seed;
            self.mapping.seed = seed;
        }
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.codebook.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        if self.experiment.ks.contains(&0) || self.experiment.tasks == 0 {
            return Err(XpqError::Config("experiment ks and tasks must be positive".into()));
        }
        if self.experiment.modes.is_empty() {
            return Err(XpqError::Config("experiment.modes is empty".into()));
        }
        if self.mapping.top_k == 0 || self.mapping.covering_target == 0 {
            return Err(XpqError::Config("mapping top_k and covering_target must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
