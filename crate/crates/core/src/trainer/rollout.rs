//! Episode collection: policy sampling, physics, and the latent target
//! pipeline that scores each step.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curriculum::{CurriculumState, EpisodeResult};
use super::ppo::{compute_gae, gaussian_log_prob, sample_action, ActorCritic, PpoBatch};
use crate::error::{Error, Result};
use crate::motion::{GaitSpec, GaitStyle, MotionDataset, MotionFrame, MotionWindow, NUM_JOINTS};
use crate::prior::{gaussian_kl, LatentGaussian, LatentPrior};
use crate::rewards::{anchor_reward, joint_error, mimic_reward_directed, task_reward, RewardTerms, RewardWeights};
use crate::sim::{
    build_terrain, DomainRandomization, HeightField, QuadrupedEnv, RandomizationRanges, RobotState, SimConfig,
    TerrainKind, TILE_SIZE,
};

/// Distance from the tile edge at which episodes start.
const SPAWN_MARGIN: f64 = 0.5;
const RESET_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub num_envs: usize,
    /// Control steps per environment per iteration.
    pub horizon: usize,
    /// Episode time limit in control steps.
    pub max_episode_steps: usize,
    /// Joint target = default pose + `action_scale` * action.
    pub action_scale: f64,
    pub domain_randomization: bool,
    pub randomization: RandomizationRanges,
    /// Start episodes at a random reference frame instead of the first full window.
    pub random_start: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            num_envs: 16,
            horizon: 256,
            max_episode_steps: 1500,
            action_scale: 0.5,
            domain_randomization: true,
            randomization: RandomizationRanges::default(),
            random_start: true,
        }
    }
}

/// The motion clip being imitated, with the commanded velocity it implies.
#[derive(Clone, Debug)]
pub struct Reference {
    pub dataset: Arc<MotionDataset>,
    /// +1 moves toward +x, -1 toward -x.
    pub direction: f64,
    pub speed: f64,
}

impl Reference {
    /// Direction and speed come from the clip's style label when it names a
    /// known gait, otherwise from the clip's mean base velocity.
    pub fn new(dataset: Arc<MotionDataset>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Ok(style) = dataset.style.parse::<GaitStyle>() {
            let speed = GaitSpec::for_style(style).base_speed;
            return Ok(Reference {
                dataset,
                direction: style.direction(),
                speed,
            });
        }
        let vx = dataset.frames.iter().map(|f| f.v[0]).sum::<f64>() / dataset.len() as f64;
        Ok(Reference {
            direction: if vx < 0.0 { -1.0 } else { 1.0 },
            speed: vx.abs(),
            dataset,
        })
    }

    pub fn spawn(&self) -> [f64; 2] {
        let x = if self.direction < 0.0 { TILE_SIZE - SPAWN_MARGIN } else { SPAWN_MARGIN };
        [x, 0.5 * TILE_SIZE]
    }

    /// Joint angles of the clip `steps` control steps after `start`. Clips are
    /// whole gait cycles, so playback wraps around.
    pub fn joint_target(&self, start: usize, steps: usize) -> &[f64] {
        let frames = &self.dataset.frames;
        &frames[(start + steps) % frames.len()].q
    }

    /// Whether `x` lies past the far edge of the tile.
    pub fn crossed(&self, x: f64) -> bool {
        if self.direction < 0.0 {
            x <= 0.0
        } else {
            x >= TILE_SIZE
        }
    }
}

/// Which reward terms a stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    MimicOnly,
    Full,
}

/// Read-only inputs for one collection phase.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub policy: &'a ActorCritic,
    pub prior: &'a LatentPrior,
    /// Frozen style policy for the anchor term.
    pub anchor: Option<&'a ActorCritic>,
    pub weights: &'a RewardWeights,
    /// Joint-error termination threshold, rad.
    pub tolerance: f64,
    pub mode: RewardMode,
    pub gamma: f64,
    /// Act with the policy mean instead of sampling.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Raw (unnormalized) observation.
    pub observation: Vec<f64>,
    /// Policy output in action space.
    pub action: Vec<f64>,
    /// Joint position targets sent to the motors, rad.
    pub joint_targets: [f64; NUM_JOINTS],
    pub log_prob: f64,
    /// Weighted sum of the terms, plus the discounted value of the final
    /// observation when the episode was cut by a time or distance limit.
    pub reward: f64,
    pub terms: RewardTerms,
    pub value: f64,
    /// The episode ended with this step.
    pub done: bool,
    /// Ended by failure (fall, fault or joint error), not by a limit.
    pub terminated: bool,
    pub next_observation: Vec<f64>,
    pub terrain: TerrainKind,
    /// Terrain level; 0 on flat ground.
    pub level: u32,
    /// Latent mean of the simulated window after the step.
    pub z_sim: Vec<f64>,
    /// Normalized features of the simulated window before and after the step.
    pub window: Vec<f64>,
    pub next_window: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Fall,
    Fault,
    JointError,
    Timeout,
    Traversed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub env: usize,
    pub terrain: TerrainKind,
    pub level: u32,
    pub length: usize,
    pub end: EpisodeEnd,
    pub mimic: f64,
    pub task: f64,
    pub anchor: f64,
    /// Reference frame the episode started from.
    pub start_frame: usize,
    /// Robot state after reset and after every step, when recording is on.
    pub states: Vec<RobotState>,
}

impl EpisodeRecord {
    pub fn traversed(&self) -> bool {
        self.end == EpisodeEnd::Traversed
    }
}

/// Transitions stored step-major: entry `t * num_envs + e`.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub horizon: usize,
    pub transitions: Vec<Transition>,
    /// Value of each environment's observation after the last step (0 when
    /// that step ended an episode).
    pub bootstrap: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Advantages and returns, in transition order.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.num_envs;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..n {
            let idx: Vec<usize> = (0..self.horizon).map(|t| t * n + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.transitions[i].reward).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.transitions[i].value).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.transitions[i].done).collect();
            let (a, g) = compute_gae(&r, &v, &d, self.bootstrap[e], gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = g[k];
            }
        }
        Ok((adv, ret))
    }

    /// PPO inputs with observations normalized by `policy`'s current statistics.
    pub fn to_ppo_batch(&self, policy: &ActorCritic, gamma: f64, lambda: f64) -> Result<PpoBatch> {
        let (advantages, returns) = self.advantages(gamma, lambda)?;
        let obs: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.observation.clone()).collect();
        let actions: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.action.clone()).collect();
        Ok(PpoBatch {
            obs: policy.normalize(crate::nn::rows_to_matrix(&obs).view())?,
            actions: crate::nn::rows_to_matrix(&actions),
            log_probs: self.transitions.iter().map(|t| t.log_prob).collect(),
            advantages,
            returns,
        })
    }

    pub fn raw_observations(&self) -> Array2<f64> {
        let obs: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.observation.clone()).collect();
        crate::nn::rows_to_matrix(&obs)
    }
}

struct EnvSlot {
    env: QuadrupedEnv,
    rng: ChaCha8Rng,
    kind: TerrainKind,
    level: u32,
    frames: VecDeque<MotionFrame>,
    features: Vec<f64>,
    z_target: LatentGaussian,
    q_target: Vec<f64>,
    obs: Vec<f64>,
    steps: usize,
    start_frame: usize,
    sums: [f64; 3],
    states: Vec<RobotState>,
    active: bool,
    pending: Option<Vec<f64>>,
}

/// Target latent forecast from normalized features: encode, predict the next
/// window, encode that.
fn forecast(prior: &LatentPrior, features: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (zm, _) = prior.encode_rows(features.view())?;
    let predicted = prior.predict_rows(zm.view())?;
    prior.encode_rows(predicted.view())
}

fn gaussian_row(mean: &Array2<f64>, std: &Array2<f64>, i: usize) -> Result<LatentGaussian> {
    LatentGaussian::new(mean.row(i).to_vec(), std.row(i).to_vec())
}

/// Vectorized environments sharing one reference clip and terrain assignment.
pub struct RolloutCollector {
    config: RolloutConfig,
    sim: SimConfig,
    reference: Reference,
    slots: Vec<EnvSlot>,
    terrains: BTreeMap<(TerrainKind, u32), Arc<HeightField>>,
    terrain_seed: u64,
    /// Per-environment terrain levels; `None` keeps every environment on flat ground.
    pub curriculum: Option<CurriculumState>,
    auto_reset: bool,
    record_states: bool,
    finished: Vec<EpisodeRecord>,
}

impl RolloutCollector {
    /// Builds and resets `config.num_envs` environments. Environment `e` draws
    /// from its own random stream derived from `seed`.
    pub fn new(
        config: RolloutConfig,
        sim: SimConfig,
        reference: Reference,
        curriculum: Option<CurriculumState>,
        prior: &LatentPrior,
        seed: u64,
    ) -> Result<Self> {
        if config.num_envs == 0 {
            return Err(Error::InvalidArgument("at least one environment is required".into()));
        }
        if let Some(c) = &curriculum {
            if c.len() != config.num_envs {
                return Err(Error::Shape {
                    context: "curriculum environments",
                    expected: config.num_envs,
                    got: c.len(),
                });
            }
        }
        if reference.dataset.len() <= prior.history() {
            return Err(Error::InvalidArgument(format!(
                "reference clip has {} frames; a window needs {}",
                reference.dataset.len(),
                prior.history() + 1
            )));
        }
        let flat = Arc::new(HeightField::flat());
        let mut collector = RolloutCollector {
            slots: Vec::with_capacity(config.num_envs),
            terrains: BTreeMap::new(),
            terrain_seed: seed,
            curriculum,
            auto_reset: true,
            record_states: false,
            finished: Vec::new(),
            config,
            sim,
            reference,
        };
        for e in 0..collector.config.num_envs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e as u64 + 1);
            collector.slots.push(EnvSlot {
                env: QuadrupedEnv::new(collector.sim.clone(), flat.clone()),
                rng,
                kind: TerrainKind::Flat,
                level: 0,
                frames: VecDeque::new(),
                features: Vec::new(),
                z_target: LatentGaussian::standard(prior.latent_dim()),
                q_target: Vec::new(),
                obs: Vec::new(),
                steps: 0,
                start_frame: 0,
                sums: [0.0; 3],
                states: Vec::new(),
                active: true,
                pending: None,
            });
        }
        for e in 0..collector.config.num_envs {
            collector.reset_env(e, prior)?;
        }
        Ok(collector)
    }

    /// Evaluation mode: each environment runs a single episode and then idles,
    /// and every robot state is kept in the episode record.
    pub fn single_episode(mut self) -> Self {
        self.auto_reset = false;
        self.record_states = true;
        for s in &mut self.slots {
            s.states = vec![s.env.state()];
        }
        self
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    pub fn active_envs(&self) -> usize {
        self.slots.iter().filter(|s| s.active).count()
    }

    /// Steps taken so far in each environment's current episode.
    pub fn running_lengths(&self) -> Vec<usize> {
        self.slots.iter().filter(|s| s.active).map(|s| s.steps).collect()
    }

    pub fn take_finished(&mut self) -> Vec<EpisodeRecord> {
        std::mem::take(&mut self.finished)
    }

    fn terrain_for(&mut self, kind: TerrainKind, level: u32) -> Result<Arc<HeightField>> {
        if kind == TerrainKind::Flat {
            return Ok(self
                .terrains
                .entry((kind, 0))
                .or_insert_with(|| Arc::new(HeightField::flat()))
                .clone());
        }
        if let Some(t) = self.terrains.get(&(kind, level)) {
            return Ok(t.clone());
        }
        let seed = self.terrain_seed ^ (u64::from(level) << 8) ^ kind as u64;
        let t = Arc::new(build_terrain(kind, level, seed)?);
        self.terrains.insert((kind, level), t.clone());
        Ok(t)
    }

    fn reset_env(&mut self, e: usize, prior: &LatentPrior) -> Result<()> {
        let (kind, level) = match &self.curriculum {
            Some(c) => (c.kinds[e], c.levels[e]),
            None => (TerrainKind::Flat, 0),
        };
        let terrain = self.terrain_for(kind, level)?;
        let w = prior.history();
        let spawn = self.reference.spawn();
        let frames = &self.reference.dataset.frames;
        let cfg = &self.config;
        let slot = &mut self.slots[e];
        slot.env.set_terrain(terrain);
        slot.kind = kind;
        slot.level = level;
        let mut last_err = None;
        for _ in 0..RESET_ATTEMPTS {
            let k = if cfg.random_start {
                slot.rng.random_range(w..frames.len())
            } else {
                w
            };
            let dr = if cfg.domain_randomization {
                cfg.randomization.sample(&mut slot.rng)
            } else {
                DomainRandomization::nominal()
            };
            let state = match slot.env.reset(&frames[k], spawn, dr) {
                Ok(s) => s,
                Err(err @ Error::InitialPenetration { .. }) => {
                    last_err = Some(err);
                    continue;
                }
                Err(err) => return Err(err),
            };
            let shift: Vec<f64> = (0..3).map(|i| state.position[i] - frames[k].p[i]).collect();
            slot.frames = frames[k - w..k]
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    (0..3).for_each(|i| f.p[i] += shift[i]);
                    f
                })
                .collect();
            slot.frames.push_back(state.to_frame());
            let window = MotionWindow {
                frames: slot.frames.iter().cloned().collect(),
                frame_rate: prior.frame_rate(),
            };
            slot.features = prior.features(&window)?;
            let x = Array2::from_shape_vec((1, slot.features.len()), slot.features.clone())
                .expect("one row");
            let (tm, ts) = forecast(prior, &x)?;
            slot.z_target = gaussian_row(&tm, &ts, 0)?;
            slot.q_target = self.reference.joint_target(k, 1).to_vec();
            slot.obs = slot.env.observation(slot.z_target.mean())?.to_vec();
            slot.steps = 0;
            slot.start_frame = k;
            slot.sums = [0.0; 3];
            slot.states = if self.record_states { vec![state] } else { Vec::new() };
            return Ok(());
        }
        Err(last_err.unwrap_or(Error::InvalidArgument("reset failed".into())))
    }

    /// Runs `horizon` control steps in every environment.
    pub fn collect(&mut self, ctx: &StepContext, horizon: usize) -> Result<RolloutBatch> {
        let n = self.num_envs();
        let mut transitions = Vec::with_capacity(horizon * n);
        let mut episodes = Vec::new();
        let mut last_done = vec![false; n];
        for _ in 0..horizon {
            let step = self.step(ctx)?;
            for (e, t) in step.into_iter().enumerate() {
                let t = t.expect("training environments stay active");
                last_done[e] = t.done;
                transitions.push(t);
            }
            episodes.append(&mut self.finished);
        }
        let obs: Vec<Vec<f64>> = self.slots.iter().map(|s| s.obs.clone()).collect();
        let norm = ctx.policy.normalize(crate::nn::rows_to_matrix(&obs).view())?;
        let values = ctx.policy.values(norm.view())?;
        let bootstrap = (0..n).map(|e| if last_done[e] { 0.0 } else { values[e] }).collect();
        Ok(RolloutBatch {
            num_envs: n,
            horizon,
            transitions,
            bootstrap,
            episodes,
        })
    }

    /// Steps every active environment until each has finished one episode.
    /// Requires [`Self::single_episode`] mode.
    pub fn run_episodes(&mut self, ctx: &StepContext) -> Result<Vec<EpisodeRecord>> {
        if self.auto_reset {
            return Err(Error::InvalidArgument("run_episodes needs single-episode mode".into()));
        }
        while self.active_envs() > 0 {
            self.step(ctx)?;
        }
        let mut out = self.take_finished();
        out.sort_by_key(|r| r.env);
        Ok(out)
    }

    /// One control step of every active environment. Inactive environments
    /// yield `None`.
    pub fn step(&mut self, ctx: &StepContext) -> Result<Vec<Option<Transition>>> {
        let prior = ctx.prior;
        let active: Vec<usize> = (0..self.slots.len()).filter(|&e| self.slots[e].active).collect();
        let mut out: Vec<Option<Transition>> = vec![None; self.slots.len()];
        if active.is_empty() {
            return Ok(out);
        }
        let m = active.len();
        let raw_rows: Vec<Vec<f64>> = active.iter().map(|&e| self.slots[e].obs.clone()).collect();
        let raw = crate::nn::rows_to_matrix(&raw_rows);
        let obs = ctx.policy.normalize(raw.view())?;
        let (mean, log_std) = ctx.policy.distribution_rows(obs.view())?;
        let values = ctx.policy.values(obs.view())?;
        let anchor_dist = match (ctx.mode, ctx.anchor) {
            (RewardMode::Full, Some(a)) => {
                let o = a.normalize(raw.view())?;
                Some(a.distribution_rows(o.view())?)
            }
            _ => None,
        };

        // sample actions, then advance the physics in parallel
        let scale = self.config.action_scale;
        let default = self.sim.morphology.default_pose();
        let mut actions = Vec::with_capacity(m);
        for (i, &e) in active.iter().enumerate() {
            let mu = mean.row(i).to_vec();
            let ls = log_std.row(i).to_vec();
            let (a, lp) = if ctx.deterministic {
                let lp = gaussian_log_prob(&mu, &ls, &mu);
                (mu, lp)
            } else {
                sample_action(&mu, &ls, &mut self.slots[e].rng)
            };
            self.slots[e].pending = Some(a.clone());
            actions.push((a, lp));
        }
        let outcomes: Vec<(usize, crate::sim::StepOutcome, [f64; NUM_JOINTS])> = self
            .slots
            .par_iter_mut()
            .enumerate()
            .filter(|(_, s)| s.active)
            .map(|(e, s)| {
                let a = s.pending.take().expect("action set");
                let mut targets = [0.0; NUM_JOINTS];
                for j in 0..NUM_JOINTS {
                    targets[j] = default[j] + scale * a[j];
                }
                let outcome = s.env.step(&targets);
                (e, outcome, targets)
            })
            .collect();

        // encode the new simulated windows
        let mut feature_rows = Vec::with_capacity(m);
        for (e, outcome, _) in &outcomes {
            let slot = &mut self.slots[*e];
            if !outcome.fault {
                slot.frames.pop_front();
                slot.frames.push_back(outcome.state.to_frame());
            }
            let window = MotionWindow {
                frames: slot.frames.iter().cloned().collect(),
                frame_rate: prior.frame_rate(),
            };
            let f = prior.features(&window)?;
            feature_rows.push(if f.iter().all(|x| x.is_finite()) { f } else { slot.features.clone() });
        }
        let features = crate::nn::rows_to_matrix(&feature_rows);
        let (zm, zs) = prior.encode_rows(features.view())?;
        let (tm, ts) = forecast(prior, &features)?;

        let mut truncated = Vec::new();
        for (i, (e, outcome, targets)) in outcomes.into_iter().enumerate() {
            let z_sim = gaussian_row(&zm, &zs, i)?;
            let slot = &mut self.slots[e];
            let mimic = mimic_reward_directed(&slot.z_target, &z_sim, ctx.weights.mimic_scale, ctx.weights.mimic_direction)?;
            let state = outcome.state;
            let err = joint_error(&state.q, &slot.q_target)?;
            let (task, anchor) = match ctx.mode {
                RewardMode::MimicOnly => (None, None),
                RewardMode::Full => {
                    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                        state.orientation[0],
                        state.orientation[1],
                        state.orientation[2],
                        state.orientation[3],
                    ));
                    let g = rot.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0));
                    let w = rot.inverse_transform_vector(&Vector3::from(state.angular_velocity));
                    let v_hat = [self.reference.direction * self.reference.speed, 0.0, 0.0];
                    let task = task_reward(&state.linear_velocity, &v_hat, &[g.x, g.y, g.z], &[w.x, w.y, w.z], ctx.weights);
                    let anchor = match &anchor_dist {
                        Some((sm, sls)) => {
                            let cur = LatentGaussian::new(mean.row(i).to_vec(), log_std.row(i).mapv(f64::exp).to_vec())?;
                            let sty = LatentGaussian::new(sm.row(i).to_vec(), sls.row(i).mapv(f64::exp).to_vec())?;
                            Some(anchor_reward(&cur, &sty, ctx.weights.anchor)?)
                        }
                        None => None,
                    };
                    (Some(task.max(-1e6)), anchor)
                }
            };
            let terms = RewardTerms { mimic, task, anchor };
            let end = if outcome.fault {
                Some(EpisodeEnd::Fault)
            } else if outcome.fallen {
                Some(EpisodeEnd::Fall)
            } else if err > ctx.tolerance {
                Some(EpisodeEnd::JointError)
            } else if self.reference.crossed(state.position[0]) {
                Some(EpisodeEnd::Traversed)
            } else if slot.steps + 1 >= self.config.max_episode_steps {
                Some(EpisodeEnd::Timeout)
            } else {
                None
            };
            let terminated = matches!(end, Some(EpisodeEnd::Fault | EpisodeEnd::Fall | EpisodeEnd::JointError));
            let next_obs = if outcome.fault {
                slot.obs.clone()
            } else {
                slot.env.observation(&tm.row(i).to_vec())?.to_vec()
            };
            if matches!(end, Some(EpisodeEnd::Traversed | EpisodeEnd::Timeout)) {
                truncated.push(e);
            }
            let (a, lp) = actions[i].clone();
            out[e] = Some(Transition {
                observation: std::mem::take(&mut slot.obs),
                action: a,
                joint_targets: targets,
                log_prob: lp,
                reward: terms.total(ctx.weights),
                terms,
                value: values[i],
                done: end.is_some(),
                terminated,
                next_observation: next_obs.clone(),
                terrain: slot.kind,
                level: slot.level,
                z_sim: z_sim.mean().to_vec(),
                window: std::mem::replace(&mut slot.features, feature_rows[i].clone()),
                next_window: feature_rows[i].clone(),
            });
            slot.z_target = gaussian_row(&tm, &ts, i)?;
            slot.q_target = self.reference.joint_target(slot.start_frame, slot.steps + 2).to_vec();
            slot.obs = next_obs;
            slot.steps += 1;
            slot.sums[0] += mimic;
            slot.sums[1] += task.unwrap_or(0.0);
            slot.sums[2] += anchor.unwrap_or(0.0);
            if self.record_states {
                slot.states.push(state);
            }
            if let Some(end) = end {
                self.finished.push(EpisodeRecord {
                    env: e,
                    terrain: slot.kind,
                    level: slot.level,
                    length: slot.steps,
                    end,
                    mimic: slot.sums[0],
                    task: slot.sums[1],
                    anchor: slot.sums[2],
                    start_frame: slot.start_frame,
                    states: std::mem::take(&mut slot.states),
                });
            }
        }

        // time and distance limits are not failures: bootstrap from the final observation
        if !truncated.is_empty() {
            let rows: Vec<Vec<f64>> = truncated.iter().map(|&e| out[e].as_ref().expect("stepped").next_observation.clone()).collect();
            let o = ctx.policy.normalize(crate::nn::rows_to_matrix(&rows).view())?;
            let v = ctx.policy.values(o.view())?;
            for (k, &e) in truncated.iter().enumerate() {
                if let Some(t) = out[e].as_mut() {
                    t.reward += ctx.gamma * v[k];
                }
            }
        }

        let ended: Vec<usize> = out
            .iter()
            .enumerate()
            .filter_map(|(e, t)| t.as_ref().filter(|t| t.done).map(|_| e))
            .collect();
        for e in ended {
            if let (Some(c), Some(rec)) = (self.curriculum.as_mut(), self.finished.iter().rev().find(|r| r.env == e)) {
                c.record(&EpisodeResult {
                    env: e,
                    level: rec.level,
                    traversed: rec.traversed(),
                })?;
            }
            if self.auto_reset {
                self.reset_env(e, prior)?;
            } else {
                self.slots[e].active = false;
            }
        }
        Ok(out)
    }
}

/// Mean of one reward term over a batch.
pub fn mean_term(batch: &RolloutBatch, term: impl Fn(&RewardTerms) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = batch.transitions.iter().filter_map(|t| term(&t.terms)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean KL between the action distributions of two policies over raw observations.
pub fn policy_divergence(a: &ActorCritic, b: &ActorCritic, raw: &Array2<f64>) -> Result<f64> {
    if raw.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let (ma, la) = a.distribution_rows(a.normalize(raw.view())?.view())?;
    let (mb, lb) = b.distribution_rows(b.normalize(raw.view())?.view())?;
    let mut total = 0.0;
    for i in 0..raw.nrows() {
        let ga = LatentGaussian::new(ma.row(i).to_vec(), la.row(i).mapv(f64::exp).to_vec())?;
        let gb = LatentGaussian::new(mb.row(i).to_vec(), lb.row(i).mapv(f64::exp).to_vec())?;
        total += gaussian_kl(&ga, &gb)?;
    }
    Ok(total / raw.nrows() as f64)
}
