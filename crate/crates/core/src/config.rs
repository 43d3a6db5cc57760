//! Run configuration: one strict JSON document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::{GaitStyle, MotionDataset, DEFAULT_FRAME_RATE};
use crate::prior::PriorConfig;
use crate::rewards::{RewardWeights, ToleranceSchedule};
use crate::sim::{SimConfig, TerrainKind, MAX_LEVEL, MIN_LEVEL};
use crate::trainer::{PpoConfig, RolloutConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prior,
    #[default]
    Imitation,
    Adaptation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prior => "prior",
            Stage::Imitation => "imitation",
            Stage::Adaptation => "adaptation",
        }
    }
}

/// Terrain kind with the level range its curriculum and evaluation cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainRange {
    pub kind: TerrainKind,
    #[serde(default = "min_level")]
    pub min_level: u32,
    #[serde(default = "max_level")]
    pub max_level: u32,
}

fn min_level() -> u32 {
    MIN_LEVEL
}

fn max_level() -> u32 {
    MAX_LEVEL
}

impl TerrainRange {
    pub fn full(kind: TerrainKind) -> Self {
        TerrainRange {
            kind,
            min_level: MIN_LEVEL,
            max_level: MAX_LEVEL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub tolerance: ToleranceSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// PPO iterations of the flat-ground style stage.
    pub imitation_iterations: usize,
    /// PPO iterations of the terrain stage.
    pub adaptation_iterations: usize,
    pub rollout: RolloutConfig,
    pub ppo: PpoConfig,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Initial action standard deviation.
    pub initial_std: f64,
    /// Encoder fine-tuning steps on the mixed buffer per iteration (0 disables).
    pub encoder_finetune_steps: usize,
    /// Keep high-reward terrain windows and refine the predictor on them.
    pub adaptation_buffer: bool,
    pub buffer_capacity: usize,
    /// Iterations between predictor refinements.
    pub predictor_interval: usize,
    pub predictor_steps: usize,
    pub predictor_batch: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            imitation_iterations: 300,
            adaptation_iterations: 300,
            rollout: RolloutConfig::default(),
            ppo: PpoConfig::default(),
            actor_hidden: vec![512, 256, 128],
            critic_hidden: vec![512, 256, 128],
            initial_std: 0.5,
            encoder_finetune_steps: 0,
            adaptation_buffer: true,
            buffer_capacity: 10_000,
            predictor_interval: 10,
            predictor_steps: 100,
            predictor_batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Motion clip files, one style each. When empty, clips of `styles` are
    /// generated procedurally.
    pub datasets: Vec<PathBuf>,
    pub styles: Vec<GaitStyle>,
    /// Length of generated clips, s.
    pub clip_seconds: f64,
    /// Style label of the clip the policy imitates.
    pub style: String,
    pub terrains: Vec<TerrainRange>,
    pub prior: PriorConfig,
    pub env: SimConfig,
    pub rewards: RewardConfig,
    pub trainer: TrainerConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::default(),
            seed: 0,
            datasets: Vec::new(),
            styles: vec![GaitStyle::Trot, GaitStyle::Pace],
            clip_seconds: 20.0,
            style: GaitStyle::Trot.as_str().into(),
            terrains: [TerrainKind::Stairs, TerrainKind::Waves, TerrainKind::Noise, TerrainKind::Flat]
                .into_iter()
                .map(TerrainRange::full)
                .collect(),
            prior: PriorConfig::default(),
            env: SimConfig::default(),
            rewards: RewardConfig::default(),
            trainer: TrainerConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON form, ignoring `out_dir` so a run
    /// hashes the same wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        Ok(hex_digest(serde_json::to_string(&value)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.rewards.weights.validate()?;
        let t = &self.trainer;
        if t.rollout.num_envs == 0 || t.rollout.horizon == 0 {
            return Err(Error::Config("rollout needs at least one environment and one step".into()));
        }
        if !(t.initial_std > 0.0 && t.rollout.action_scale > 0.0) {
            return Err(Error::Config("initial_std and action_scale must be positive".into()));
        }
        if self.datasets.is_empty() && self.styles.is_empty() {
            return Err(Error::Config("no datasets and no styles to generate".into()));
        }
        for r in &self.terrains {
            if !(MIN_LEVEL <= r.min_level && r.min_level <= r.max_level && r.max_level <= MAX_LEVEL) {
                return Err(Error::Config(format!(
                    "{} levels {}..={} outside {MIN_LEVEL}..={MAX_LEVEL}",
                    r.kind, r.min_level, r.max_level
                )));
            }
        }
        Ok(())
    }

    /// The configured clips: loaded from `datasets`, or generated from `styles`.
    pub fn load_datasets(&self) -> Result<Vec<MotionDataset>> {
        if self.datasets.is_empty() {
            self.styles
                .iter()
                .map(|s| MotionDataset::generate(*s, self.clip_seconds, DEFAULT_FRAME_RATE))
                .collect()
        } else {
            self.datasets.iter().map(|p| MotionDataset::load(p)).collect()
        }
    }

    /// The clip labelled `style`.
    pub fn reference_dataset(&self, datasets: &[MotionDataset]) -> Result<MotionDataset> {
        datasets
            .iter()
            .find(|d| d.style == self.style)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no clip with style `{}`", self.style)))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "trainer": {"imitation_iterations": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trainer.imitation_iterations, 3);
        assert_eq!(cfg.trainer.rollout.horizon, 256);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 7}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"trainer": {"ppo": {"clip_range": 0.1}}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
        let moved = RunConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash().unwrap(), moved.hash().unwrap());
    }

    #[test]
    fn bad_level_range_rejected() {
        let text = r#"{"terrains": [{"kind": "stairs", "min_level": 5, "max_level": 2}]}"#;
        assert!(RunConfig::from_json(text).is_err());
    }
}
