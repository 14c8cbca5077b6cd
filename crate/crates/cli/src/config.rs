//! JSON run configuration.
//!
//! Unknown keys are rejected so typos surface as exit-code-2 errors instead
//! of silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fph_core::backbone::{desk_stages, StageSpec};
use fph_core::model::CodeSource;
use fph_core::pyramid::HashConfig;
use fph_core::train::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub blocks: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub q: usize,
    pub input_size: usize,
    /// Five stages; omitted means the desk-scale default backbone.
    pub stages: Option<Vec<StageConfig>>,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// "consensus" (default) or "vertical".
    pub code_source: Option<String>,
    /// Defaults to q / 4.
    pub margin: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub triplets_per_anchor: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        HashConfig::new(self.q).map_err(|e| format!("q: {e}"))?;
        if let Some(stages) = &self.stages {
            if stages.len() != 5 {
                return Err(format!("stages: expected 5 entries, got {}", stages.len()));
            }
        }
        self.train_config().validate().map_err(|e| e.to_string())?;
        self.code_source()?;
        if !self.manifest.exists() {
            return Err(format!("manifest: {} does not exist", self.manifest.display()));
        }
        Ok(())
    }

    pub fn stage_specs(&self) -> Vec<StageSpec> {
        match &self.stages {
            Some(s) => s
                .iter()
                .map(|c| StageSpec {
                    out_channels: c.out_channels,
                    blocks: c.blocks,
                    downsample: c.downsample,
                })
                .collect(),
            None => desk_stages(),
        }
    }

    pub fn hash_config(&self) -> HashConfig {
        HashConfig::new(self.q).expect("validated")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin.unwrap_or(self.q as f64 / 4.0),
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            step_size: self.step_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            triplets_per_anchor: self.triplets_per_anchor,
            seed: self.seed,
        }
    }

    pub fn code_source(&self) -> Result<CodeSource, String> {
        match self.code_source.as_deref() {
            None | Some("consensus") => Ok(CodeSource::Consensus),
            Some("vertical") => Ok(CodeSource::Vertical),
            Some(other) => Err(format!("code_source must be 'consensus' or 'vertical', got {other:?}")),
        }
    }
}
