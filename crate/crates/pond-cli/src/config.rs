//! The JSON experiment configuration every command reads.
//!
//! One strict document carries the data spec, model geometry, run
//! schedule, split ratios, and the options the grid commands consume.
//! Unknown keys are rejected at every level, so a stored config replays
//! exactly or fails loudly. The `POND_SEED` environment variable, when
//! set, re-derives all seeds from its value — a one-knob override for CI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pond::data::{SplitRatios, SyntheticSpec};
use pond::error::PondError;
use pond::eval::PipelineConfig;
use pond::model::ModelConfig;
use pond::train::RunConfig;
use pond::Result;

/// Environment variable that overrides every configured seed.
pub const SEED_VAR: &str = "POND_SEED";

/// Everything a command needs: the pipeline configuration plus the
/// grid options. Defaults mirror the library's.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub run: RunConfig,
    pub ratios: SplitRatios,
    /// Seeds the grid commands (ablate, sweep-sources) iterate over.
    pub seeds: Vec<u64>,
    /// Source counts swept by sweep-sources; strictly ascending.
    pub counts: Vec<usize>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            spec: SyntheticSpec::default(),
            model: ModelConfig::default(),
            run: RunConfig::default(),
            ratios: SplitRatios::default(),
            seeds: (0..10).collect(),
            counts: vec![2, 4, 6, 8],
        }
    }
}

impl CliConfig {
    /// Read, parse, validate, and apply the seed override. Read failures
    /// are I/O errors; parse and validation failures are config errors.
    pub fn load(path: &Path) -> Result<CliConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| PondError::io(path, e))?;
        let mut cfg: CliConfig = serde_json::from_str(&text).map_err(|e| {
            PondError::config(format!("{}: {e}", path.display()))
        })?;
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The library-side view of this configuration.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            spec: self.spec.clone(),
            model: self.model.clone(),
            run: self.run.clone(),
            ratios: self.ratios,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()
    }

    /// Re-derive data and run seeds from `POND_SEED` when it is set.
    fn apply_env_seed(&mut self) -> Result<()> {
        let Ok(raw) = std::env::var(SEED_VAR) else {
            return Ok(());
        };
        let seed: u64 = raw.parse().map_err(|_| {
            PondError::config(format!("{SEED_VAR} must be an unsigned integer, got {raw:?}"))
        })?;
        let reseeded = self.pipeline().reseeded(seed);
        self.spec = reseeded.spec;
        self.run = reseeded.run;
        Ok(())
    }
}
