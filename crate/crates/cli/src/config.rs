//! Run configuration: one JSON document with a section per stage. Every
//! field has a default, unknown fields are rejected, and flags given on the
//! command line override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use synthamt::renderer::RenderConfig;
use synthamt::training::{RealifierConfig, TrainConfig};
use synthamt_neural::ModelConfig;

use crate::error::{io, CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into the render and training settings.
    pub seed: u64,
    /// Architecture. Taken from the checkpoint when absent and one is loaded.
    pub model: Option<ModelConfig>,
    pub render: RenderSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    /// Directory of `.mid` files or a JSON array of paths.
    pub midi_pool: Option<PathBuf>,
    /// Sample bank manifest.
    pub sample_bank: Option<PathBuf>,
    pub count: u64,
    pub renderer: RenderConfig,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            midi_pool: None,
            sample_bank: None,
            count: 100,
            renderer: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Rendered dataset. When absent, examples are rendered on the fly from
    /// the render section.
    pub data: Option<PathBuf>,
    pub steps: u64,
    /// Write `ckpt-<step>.bin` every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Batches rendered ahead of the trainer when streaming.
    pub queue: usize,
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: None,
            steps: 1000,
            checkpoint_every: 0,
            queue: 4,
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Pre-trained checkpoint to start from.
    pub checkpoint: Option<PathBuf>,
    /// Unannotated real recordings (WAV, any length).
    pub real: Option<PathBuf>,
    /// Synthetic dataset; defaults to `train.data`.
    pub synthetic: Option<PathBuf>,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Optional degradation applied to the real recordings.
    pub realifier: Option<RealifierConfig>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            real: None,
            synthetic: None,
            steps: 500,
            checkpoint_every: 0,
            realifier: None,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when no file is given. Relative paths
    /// inside the file are resolved against its directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.render.midi_pool,
            &mut cfg.render.sample_bank,
            &mut cfg.train.data,
            &mut cfg.finetune.checkpoint,
            &mut cfg.finetune.real,
            &mut cfg.finetune.synthetic,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the master seed to every stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.render.renderer.seed = self.seed;
        self.train.optim.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| CliError::Invalid(e.to_string());
        if let Some(m) = &self.model {
            m.validate().map_err(|e| invalid(&e))?;
        }
        self.render.renderer.validate().map_err(|e| invalid(&e))?;
        self.train.optim.validate().map_err(|e| invalid(&e))?;
        if self.train.queue == 0 {
            return Err(CliError::Invalid("train.queue must be at least 1".into()));
        }
        if let Some(r) = &self.finetune.realifier {
            r.validate(synthamt::audio::SAMPLE_RATE).map_err(|e| invalid(&e))?;
        }
        Ok(())
    }
}

pub fn require_file(what: &'static str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { what, path: path.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_fields_fail() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"optim": {"batch": 2}}}"#).is_err());
    }

    #[test]
    fn seed_flag_reaches_every_stage() {
        let cfg = RunConfig::default().with_seed(Some(42));
        assert_eq!((cfg.seed, cfg.render.renderer.seed, cfg.train.optim.seed), (42, 42, 42));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.optim.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.render.renderer.limit_prob = 2.0;
        assert!(cfg.validate().is_err());
    }
}
