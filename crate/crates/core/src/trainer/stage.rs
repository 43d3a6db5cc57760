//! Stage driver: prior pretraining, flat-ground style imitation and terrain
//! adaptation, each reading the previous stage's checkpoint.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adaptation::{adaptation_insert, finetune_predictor, AdaptationBuffer};
use super::checkpoint::PolicyCheckpoint;
use super::curriculum::{curriculum_update, CurriculumState};
use super::ppo::{ppo_update, ActorCritic, PpoOptimizers};
use super::rollout::{mean_term, Reference, RewardMode, RolloutCollector, StepContext};
use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::motion::{MotionDataset, NUM_JOINTS};
use crate::prior::{EpochLog, LatentPrior, MixedReplayBuffer, Store};
use crate::sim::TerrainKind;

pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const STYLE_CHECKPOINT: &str = "style_policy.ckpt";
pub const ADAPTED_CHECKPOINT: &str = "adapted_policy.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRIOR_METRICS_FILE: &str = "prior_metrics.csv";

/// One row of `metrics.csv`. Terms a stage does not use are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub stage: Stage,
    pub iteration: u64,
    pub reward_mimic: f64,
    pub reward_task: Option<f64>,
    pub reward_anchor: Option<f64>,
    pub reward_total: f64,
    /// Mean length of the episodes that ended this iteration.
    pub episode_length: Option<f64>,
    pub episodes: usize,
    pub traversal_rate: Option<f64>,
    pub tolerance: f64,
    pub level_flat: Option<f64>,
    pub level_stairs: Option<f64>,
    pub level_waves: Option<f64>,
    pub level_noise: Option<f64>,
    pub buffer_size: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub encoder_divergence: Option<f64>,
    pub predictor_loss: Option<f64>,
    pub skipped_updates: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    /// Hex SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
    pub metrics: Vec<IterationMetrics>,
    pub prior_log: Vec<EpochLog>,
}

fn write_config(config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_json()?)?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new.
fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn require(path: PathBuf, stage: &'static str, missing: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite { stage, missing, path })
    }
}

/// Runs one stage under `config.out_dir`.
pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<StageOutcome> {
    config.validate()?;
    let dir = &config.out_dir;
    match stage {
        Stage::Prior => pretrain_stage(config, dir),
        Stage::Imitation => {
            let path = require(dir.join(PRIOR_CHECKPOINT), "imitation", "prior")?;
            let prior = LatentPrior::load(&path)?;
            policy_stage(config, stage, prior, None)
        }
        Stage::Adaptation => {
            require(dir.join(PRIOR_CHECKPOINT), "adaptation", "prior")?;
            let path = require(dir.join(STYLE_CHECKPOINT), "adaptation", "style policy (imitation stage)")?;
            let style = PolicyCheckpoint::load(&path)?;
            let prior = style.prior.clone();
            policy_stage(config, stage, prior, Some(style))
        }
    }
}

fn pretrain_stage(config: &RunConfig, dir: &Path) -> Result<StageOutcome> {
    write_config(config, dir)?;
    let datasets = config.load_datasets()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prior = LatentPrior::for_datasets(config.prior.clone(), &datasets, &mut rng)?;
    let log = prior.pretrain(&datasets, config.prior.epochs, config.prior.batch_size, &mut rng)?;
    let path = dir.join(PRIOR_CHECKPOINT);
    prior.save(&path)?;
    let metrics_path = dir.join(PRIOR_METRICS_FILE);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    append_csv(&metrics_path, &log)?;
    Ok(StageOutcome {
        stage: Stage::Prior,
        checkpoint_hash: super::checkpoint::file_hash(&path)?,
        checkpoint: path,
        metrics: Vec::new(),
        prior_log: log,
    })
}

/// Normalized features of every window of `dataset`.
pub fn reference_windows(prior: &LatentPrior, dataset: &MotionDataset) -> Result<Vec<Vec<f64>>> {
    dataset.windows(prior.history()).iter().map(|w| prior.features(w)).collect()
}

fn policy_stage(config: &RunConfig, stage: Stage, mut prior: LatentPrior, style: Option<PolicyCheckpoint>) -> Result<StageOutcome> {
    write_config(config, &config.out_dir)?;
    let t = &config.trainer;
    let datasets = config.load_datasets()?;
    let dataset = config.reference_dataset(&datasets)?;
    let reference = Reference::new(Arc::new(dataset.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let obs_dim = config.env.observation_dim(prior.latent_dim());

    let (mut policy, anchor, first_iteration, curriculum, mode, collector_seed) = match &style {
        None => {
            let p = ActorCritic::new(obs_dim, NUM_JOINTS, &t.actor_hidden, &t.critic_hidden, t.initial_std, &mut rng)?;
            (p, None, 0, None, RewardMode::MimicOnly, config.seed)
        }
        Some(s) => {
            let ranges: Vec<(TerrainKind, u32, u32)> =
                config.terrains.iter().map(|r| (r.kind, r.min_level, r.max_level)).collect();
            let c = CurriculumState::split_ranges(&ranges, t.rollout.num_envs);
            (s.policy.clone(), Some(s.policy.clone()), s.iterations, Some(c), RewardMode::Full, config.seed ^ 0x5eed)
        }
    };
    if policy.obs_dim() != obs_dim {
        return Err(Error::Shape {
            context: "policy observation",
            expected: obs_dim,
            got: policy.obs_dim(),
        });
    }
    let mut opt = PpoOptimizers::new(t.ppo.optimizer);
    let mut collector = RolloutCollector::new(t.rollout.clone(), config.env.clone(), reference, curriculum, &prior, collector_seed)?;
    let mut mixed = MixedReplayBuffer::new(prior.config().buffer_capacity);
    for f in reference_windows(&prior, &dataset)? {
        mixed.push(Store::Mocap, f);
    }
    let mut buffer = AdaptationBuffer::new(t.buffer_capacity);
    let iterations = match stage {
        Stage::Adaptation => t.adaptation_iterations,
        _ => t.imitation_iterations,
    };
    let weights = config.rewards.weights;
    let schedule = config.rewards.tolerance;
    let mut metrics = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let global = first_iteration + it as u64;
        let tolerance = schedule.current_threshold(global);
        let batch = {
            let ctx = StepContext {
                policy: &policy,
                prior: &prior,
                anchor: anchor.as_ref(),
                weights: &weights,
                tolerance,
                mode,
                gamma: t.ppo.gamma,
                deterministic: false,
            };
            collector.collect(&ctx, t.rollout.horizon)?
        };
        let ppo_batch = batch.to_ppo_batch(&policy, t.ppo.gamma, t.ppo.lambda)?;
        let stats = ppo_update(&mut policy, &mut opt, &ppo_batch, &t.ppo, &mut rng)?;
        policy.obs_norm.update(batch.raw_observations().view());

        let mut divergence = None;
        if t.encoder_finetune_steps > 0 {
            for tr in &batch.transitions {
                mixed.push(Store::Sim, tr.next_window.clone());
            }
            divergence = prior.finetune_mixed(&mixed, t.encoder_finetune_steps, &mut rng)?.divergence;
        }
        let mut predictor_loss = None;
        if stage == Stage::Adaptation && t.adaptation_buffer {
            adaptation_insert(&mut buffer, &batch.transitions);
            if (it + 1) % t.predictor_interval.max(1) == 0 {
                let losses = finetune_predictor(&mut prior, &buffer, t.predictor_steps, t.predictor_batch, &mut rng)?;
                predictor_loss = losses.last().copied();
            }
        }
        if let Some(c) = collector.curriculum.as_mut() {
            curriculum_update(c, &[])?;
        }

        let lengths: Vec<f64> = batch.episodes.iter().map(|e| e.length as f64).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let traversed: Vec<f64> = batch.episodes.iter().map(|e| f64::from(u8::from(e.traversed()))).collect();
        let levels = collector.curriculum.as_ref().map(|c| c.mean_levels()).unwrap_or_default();
        let level = |k: TerrainKind| levels.iter().find(|(kind, _)| *kind == k).map(|(_, l)| *l);
        let row = IterationMetrics {
            stage,
            iteration: global,
            reward_mimic: mean_term(&batch, |r| Some(r.mimic)).unwrap_or(0.0),
            reward_task: mean_term(&batch, |r| r.task),
            reward_anchor: mean_term(&batch, |r| r.anchor),
            reward_total: mean_term(&batch, |r| Some(r.total(&weights))).unwrap_or(0.0),
            episode_length: mean(&lengths),
            episodes: lengths.len(),
            traversal_rate: mean(&traversed),
            tolerance,
            level_flat: level(TerrainKind::Flat),
            level_stairs: level(TerrainKind::Stairs),
            level_waves: level(TerrainKind::Waves),
            level_noise: level(TerrainKind::Noise),
            buffer_size: buffer.len(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            encoder_divergence: divergence,
            predictor_loss,
            skipped_updates: stats.skipped,
        };
        log::info!(
            "{} iteration {}: mimic {:.4} length {:?} tolerance {:.3}",
            stage.as_str(),
            global,
            row.reward_mimic,
            row.episode_length,
            tolerance
        );
        metrics.push(row);
    }
    append_csv(&config.out_dir.join(METRICS_FILE), &metrics)?;

    let checkpoint = PolicyCheckpoint {
        stage,
        style: config.style.clone(),
        seed: config.seed,
        config_hash: config.hash()?,
        iterations: first_iteration + iterations as u64,
        action_scale: t.rollout.action_scale,
        policy,
        prior,
    };
    let path = config.out_dir.join(match stage {
        Stage::Adaptation => ADAPTED_CHECKPOINT,
        _ => STYLE_CHECKPOINT,
    });
    let hash = checkpoint.save(&path)?;
    Ok(StageOutcome {
        stage,
        checkpoint: path,
        checkpoint_hash: hash,
        metrics,
        prior_log: Vec::new(),
    })
}
