//! Evaluation: tracking errors, success rates per terrain level, and latent
//! exports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{make_windows, MotionFrame};
use crate::prior::LatentPrior;
use crate::rewards::RewardWeights;
use crate::sim::{SimConfig, TerrainKind};
use crate::trainer::{
    ActorCritic, CurriculumState, EpisodeRecord, PolicyCheckpoint, Reference, RewardMode, RolloutCollector,
    RolloutConfig, StepContext,
};

/// Success-rate thresholds (percent) reported per terrain.
pub const SUCCESS_THRESHOLDS: [f64; 5] = [95.0, 90.0, 75.0, 50.0, 10.0];
pub const DEFAULT_TRIALS: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingErrors {
    /// m^2, over 3-D base positions.
    pub base_position: f64,
    /// rad^2, per joint.
    pub joint_angle: f64,
    /// (rad/s)^2, per joint.
    pub joint_velocity: f64,
}

/// Mean squared tracking errors between aligned trajectories of equal length.
pub fn tracking_mse(sim: &[MotionFrame], reference: &[MotionFrame]) -> Result<TrackingErrors> {
    if sim.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: simulated {} vs reference {}",
            sim.len(),
            reference.len()
        )));
    }
    if sim.is_empty() {
        return Ok(TrackingErrors::default());
    }
    let n = sim.len() as f64;
    let (mut pos, mut ang, mut vel, mut joints) = (0.0, 0.0, 0.0, 0usize);
    for (s, r) in sim.iter().zip(reference) {
        if s.joint_count() != r.joint_count() {
            return Err(Error::Shape {
                context: "tracking joints",
                expected: r.joint_count(),
                got: s.joint_count(),
            });
        }
        pos += (0..3).map(|i| (s.p[i] - r.p[i]).powi(2)).sum::<f64>();
        ang += s.q.iter().zip(&r.q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        vel += s.q_dot.iter().zip(&r.q_dot).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        joints += s.joint_count();
    }
    let j = joints.max(1) as f64;
    Ok(TrackingErrors {
        base_position: pos / n,
        joint_angle: ang / j,
        joint_velocity: vel / j,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: u32,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

impl LevelRate {
    pub fn new(level: u32, successes: usize, trials: usize) -> Self {
        LevelRate {
            level,
            successes,
            trials,
            rate: successes as f64 / trials.max(1) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLevel {
    /// Percent.
    pub threshold: f64,
    /// Highest level whose success rate reaches the threshold, if any.
    pub max_level: Option<u32>,
}

/// Highest level reaching each threshold in [`SUCCESS_THRESHOLDS`].
pub fn threshold_levels(rates: &[LevelRate]) -> Vec<ThresholdLevel> {
    SUCCESS_THRESHOLDS
        .iter()
        .map(|&threshold| ThresholdLevel {
            threshold,
            max_level: rates
                .iter()
                .filter(|r| r.rate * 100.0 >= threshold - 1e-9)
                .map(|r| r.level)
                .max(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub terrain: TerrainKind,
    pub levels: Vec<LevelRate>,
    pub thresholds: Vec<ThresholdLevel>,
}

impl SuccessTable {
    pub fn new(terrain: TerrainKind, levels: Vec<LevelRate>) -> Self {
        let thresholds = threshold_levels(&levels);
        SuccessTable {
            terrain,
            levels,
            thresholds,
        }
    }

    pub fn max_level_at(&self, threshold: f64) -> Option<u32> {
        self.levels
            .iter()
            .filter(|r| r.rate * 100.0 >= threshold - 1e-9)
            .map(|r| r.level)
            .max()
    }

    /// `terrain,level,successes,trials,rate` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["terrain", "level", "successes", "trials", "rate"])?;
        for r in &self.levels {
            w.write_record([
                self.terrain.as_str().to_string(),
                r.level.to_string(),
                r.successes.to_string(),
                r.trials.to_string(),
                r.rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `terrain,threshold,max_level` rows; the level is empty when no level qualifies.
    pub fn write_thresholds_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["terrain", "threshold", "max_level"])?;
        for t in &self.thresholds {
            w.write_record([
                self.terrain.as_str().to_string(),
                t.threshold.to_string(),
                t.max_level.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationStats {
    pub mean_mimic: f64,
    /// Mean episode length in control steps; episodes still running at the end
    /// count with their length so far.
    pub mean_episode_length: f64,
    pub episodes: usize,
}

/// A policy bound to the prior, simulator and reference clip it runs against.
#[derive(Clone)]
pub struct Evaluator<'a> {
    pub policy: &'a ActorCritic,
    pub prior: &'a LatentPrior,
    pub sim: SimConfig,
    pub reference: Reference,
    pub rollout: RolloutConfig,
    pub weights: RewardWeights,
    pub seed: u64,
}

impl<'a> Evaluator<'a> {
    /// Evaluator for a checkpoint, taking the action scale stored with it.
    pub fn for_checkpoint(
        ckpt: &'a PolicyCheckpoint,
        sim: SimConfig,
        reference: Reference,
        rollout: RolloutConfig,
        seed: u64,
    ) -> Self {
        Evaluator {
            policy: &ckpt.policy,
            prior: &ckpt.prior,
            sim,
            reference,
            rollout: RolloutConfig {
                action_scale: ckpt.action_scale,
                ..rollout
            },
            weights: RewardWeights::default(),
            seed,
        }
    }

    fn context(&self, tolerance: f64, deterministic: bool) -> StepContext<'_> {
        StepContext {
            policy: self.policy,
            prior: self.prior,
            anchor: None,
            weights: &self.weights,
            tolerance,
            mode: RewardMode::MimicOnly,
            gamma: 0.99,
            deterministic,
        }
    }

    /// `trials` independent episodes on one terrain tile, each run until it
    /// ends. Joint-error termination is off.
    pub fn episodes(&self, kind: TerrainKind, level: u32, trials: usize, deterministic: bool) -> Result<Vec<EpisodeRecord>> {
        let trials = trials.max(1);
        let mut curriculum = CurriculumState::new(vec![kind; trials]);
        if kind != TerrainKind::Flat {
            curriculum.levels = vec![level; trials];
        }
        let cfg = RolloutConfig {
            num_envs: trials,
            ..self.rollout.clone()
        };
        let seed = self.seed ^ (u64::from(level) << 16) ^ ((kind as u64) << 40);
        let mut collector =
            RolloutCollector::new(cfg, self.sim.clone(), self.reference.clone(), Some(curriculum), self.prior, seed)?
                .single_episode();
        collector.run_episodes(&self.context(std::f64::consts::TAU, deterministic))
    }

    /// Share of trials crossing the tile within the time limit, acting with the policy mean.
    pub fn success_rate(&self, kind: TerrainKind, level: u32, trials: usize) -> Result<LevelRate> {
        let eps = self.episodes(kind, level, trials, true)?;
        Ok(LevelRate::new(level, eps.iter().filter(|e| e.traversed()).count(), eps.len()))
    }

    pub fn success_table(&self, kind: TerrainKind, levels: &[u32], trials: usize) -> Result<SuccessTable> {
        let rates = levels
            .iter()
            .map(|&l| self.success_rate(kind, l, trials))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuccessTable::new(kind, rates))
    }

    /// Mean mimic reward and episode length over `steps` control steps per
    /// environment on flat ground, with resets, under a fixed tolerance.
    pub fn imitation_stats(&self, steps: usize, tolerance: f64, deterministic: bool) -> Result<ImitationStats> {
        let mut collector = RolloutCollector::new(
            self.rollout.clone(),
            self.sim.clone(),
            self.reference.clone(),
            None,
            self.prior,
            self.seed,
        )?;
        let batch = collector.collect(&self.context(tolerance, deterministic), steps)?;
        let mut lengths: Vec<usize> = batch.episodes.iter().map(|e| e.length).collect();
        let finished = lengths.len();
        lengths.extend(collector.running_lengths().into_iter().filter(|l| *l > 0));
        let mimic = batch.transitions.iter().map(|t| t.terms.mimic).sum::<f64>() / batch.len().max(1) as f64;
        Ok(ImitationStats {
            mean_mimic: mimic,
            mean_episode_length: lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64,
            episodes: finished,
        })
    }

    /// Tracking errors of one deterministic flat-ground episode started at the
    /// first full reference window, over at most `steps` steps. The reference
    /// is shifted so both trajectories start at the same base position.
    pub fn tracking(&self, steps: usize) -> Result<TrackingErrors> {
        let cfg = RolloutConfig {
            num_envs: 1,
            random_start: false,
            domain_randomization: false,
            max_episode_steps: steps.max(1),
            ..self.rollout.clone()
        };
        let mut collector = RolloutCollector::new(cfg, self.sim.clone(), self.reference.clone(), None, self.prior, self.seed)?
            .single_episode();
        let ep = collector
            .run_episodes(&self.context(std::f64::consts::TAU, true))?
            .pop()
            .ok_or(Error::EmptyDataset)?;
        let frames = &self.reference.dataset.frames;
        let n = ep.states.len().min(frames.len() - ep.start_frame);
        let sim: Vec<MotionFrame> = ep.states[..n].iter().map(|s| s.to_frame()).collect();
        let first = &frames[ep.start_frame];
        let shift: Vec<f64> = (0..3).map(|i| sim[0].p[i] - first.p[i]).collect();
        let reference: Vec<MotionFrame> = frames[ep.start_frame..ep.start_frame + n]
            .iter()
            .map(|f| {
                let mut f = f.clone();
                (0..3).for_each(|i| f.p[i] += shift[i]);
                f
            })
            .collect();
        tracking_mse(&sim, &reference)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTracking {
    pub style: String,
    pub errors: TrackingErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub checkpoint_hash: String,
    pub tracking: Vec<StyleTracking>,
    pub success: Vec<SuccessTable>,
}

/// Writes `style,z0,...,z{d-1}` with one row per window of each labelled
/// clip, in input order. Returns the number of rows.
pub fn export_latents<W: Write>(prior: &LatentPrior, clips: &[(String, Vec<MotionFrame>)], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["style".to_string()];
    header.extend((0..prior.latent_dim()).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    let mut rows = 0;
    for (label, frames) in clips {
        for window in make_windows(frames, prior.history(), prior.frame_rate()) {
            let z = prior.encode(&window)?;
            let mut rec = vec![label.clone()];
            rec.extend(z.mean().iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
