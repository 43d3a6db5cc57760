//! Versioned policy checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppo::{ActorCritic, RunningNormalizer};
use crate::config::{hex_digest, Stage};
use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::prior::LatentPrior;

pub const POLICY_FORMAT: &str = "latentmimic.policy";
pub const POLICY_VERSION: u32 = 1;

/// A trained policy together with the latent prior it was trained against
/// (the encoder may have been fine-tuned during training).
#[derive(Clone, Debug)]
pub struct PolicyCheckpoint {
    pub stage: Stage,
    pub style: String,
    pub seed: u64,
    pub config_hash: String,
    /// PPO iterations behind this policy, counting earlier stages.
    pub iterations: u64,
    pub action_scale: f64,
    pub policy: ActorCritic,
    pub prior: LatentPrior,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRecord {
    format: String,
    version: u32,
    stage: Stage,
    style: String,
    seed: u64,
    config_hash: String,
    iterations: u64,
    action_scale: f64,
    actor: serde_json::Value,
    critic: serde_json::Value,
    obs_normalizer: RunningNormalizer,
    prior: serde_json::Value,
}

impl PolicyCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        let rec = PolicyRecord {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            stage: self.stage,
            style: self.style.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            iterations: self.iterations,
            action_scale: self.action_scale,
            actor: self.policy.actor.to_value()?,
            critic: self.policy.critic.to_value()?,
            obs_normalizer: self.policy.obs_norm.clone(),
            prior: serde_json::from_str(&self.prior.to_json()?)?,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PolicyRecord = serde_json::from_str(text)?;
        if rec.format != POLICY_FORMAT || rec.version != POLICY_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported policy checkpoint {} v{}",
                rec.format, rec.version
            )));
        }
        let actor = DenseNet::from_value(rec.actor)?;
        let critic = DenseNet::from_value(rec.critic)?;
        if actor.input_size() != rec.obs_normalizer.dim() || critic.input_size() != actor.input_size() {
            return Err(Error::Shape {
                context: "policy checkpoint observation",
                expected: actor.input_size(),
                got: rec.obs_normalizer.dim(),
            });
        }
        Ok(PolicyCheckpoint {
            stage: rec.stage,
            style: rec.style,
            seed: rec.seed,
            config_hash: rec.config_hash,
            iterations: rec.iterations,
            action_scale: rec.action_scale,
            policy: ActorCritic {
                actor,
                critic,
                obs_norm: rec.obs_normalizer,
            },
            prior: LatentPrior::from_json(&rec.prior.to_string())?,
        })
    }

    /// Writes the checkpoint and returns the hex SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json()?;
        std::fs::write(path, &text)?;
        Ok(hex_digest(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}
