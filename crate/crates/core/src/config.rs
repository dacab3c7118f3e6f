//! Versioned run configuration.
//!
//! A run directory always contains the exact TOML that produced it. The
//! schema is strict: unknown keys are rejected, and `schema_version` must
//! match, so silent drift between configs and binaries cannot happen.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::losses::LossWeights;
use crate::scene::SceneParams;
use crate::student::AblationFlags;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub params: SceneParams,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { params: SceneParams::default(), n_train: 200, n_val: 20, n_test: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub selection_ratio: f64,
    /// Detection-loss composite: cls + reg_weight * regression.
    pub reg_weight: f64,
    /// Teacher auxiliary reconstruction weight.
    pub recon_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            learning_rate: 1e-3,
            selection_ratio: 0.3,
            reg_weight: 2.0,
            recon_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub infer_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { train_steps: 10, beta_start: 1e-4, beta_end: 0.2, infer_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub severities: Vec<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_thresh: 0.1, nms_iou: 0.15, severities: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Worker cap; 1 is the deterministic single-worker default. Parallel
    /// evaluation reduces in scene order, so results match serial runs.
    pub threads: usize,
    pub precision: Precision,
    pub grid: GridSpec,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: 1,
            precision: Precision::F64,
            grid: GridSpec::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            diffusion: DiffusionConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failure: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        crate::bev::compressed_channels(self.grid.c)?;
        if !(self.train.selection_ratio > 0.0 && self.train.selection_ratio <= 1.0) {
            return Err(Error::Config("selection_ratio must lie in (0, 1]".into()));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.diffusion.infer_steps == 0 || self.diffusion.infer_steps > self.diffusion.train_steps
        {
            return Err(Error::Config(format!(
                "infer_steps {} must lie in 1..={}",
                self.diffusion.infer_steps, self.diffusion.train_steps
            )));
        }
        if self.dataset.params.n_agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        for s in &self.eval.severities {
            if !(1..=3).contains(s) {
                return Err(Error::Config(format!("severity {} outside 1..=3", s)));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<crate::diffusion::DiffusionSchedule> {
        crate::diffusion::make_schedule(
            self.diffusion.train_steps,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
    }

    pub fn eval_settings(&self) -> crate::eval::EvalSettings {
        crate::eval::EvalSettings {
            steps: self.diffusion.infer_steps,
            score_thresh: self.eval.score_thresh,
            nms_iou: self.eval.nms_iou,
            severities: self.eval.severities.clone(),
            corruptions: crate::scene::ALL_CORRUPTIONS.to_vec(),
        }
    }
}

/// Effective worker count: explicit config wins, then COOPDIFF_THREADS,
/// then the deterministic single-worker default.
pub fn effective_threads(requested: Option<usize>, cfg_threads: usize) -> usize {
    if let Some(n) = requested {
        return n.max(1);
    }
    if cfg_threads > 0 {
        return cfg_threads;
    }
    std::env::var("COOPDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|n| n.max(1))
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text.push_str("\nmystery_knob = 3\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("mystery_knob") || err.to_string().contains("unknown"));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = RunConfig::default().to_toml().replace("schema_version = 1", "schema_version = 9");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_channel_width_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.grid.c = 20;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("schema_version = 1\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.selection_ratio, 0.3);
        assert_eq!(cfg.diffusion.train_steps, 10);
    }
}
