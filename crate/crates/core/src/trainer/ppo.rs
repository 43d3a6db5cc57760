//! Clipped-surrogate policy optimization for a Gaussian actor and a value critic.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DenseNet, InitSpec, Optimizer, OptimizerConfig, OutputHead, Tape};
use crate::prior::LatentGaussian;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 512,
            entropy_coef: 0.005,
            value_coef: 1.0,
            max_grad_norm: 1.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Running per-feature mean and variance, merged batch by batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningNormalizer {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Normalized values are clipped to `[-clip, clip]`.
    pub clip: f64,
}

impl RunningNormalizer {
    pub fn new(dim: usize, clip: f64) -> Self {
        RunningNormalizer {
            count: 0.0,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, rows: ArrayView2<f64>) {
        let n = rows.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let batch_mean = rows.mean_axis(Axis(0)).expect("non-empty");
        let batch_var = rows.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for j in 0..self.dim() {
            let delta = batch_mean[j] - self.mean[j];
            let m2 = self.var[j] * self.count + batch_var[j] * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = ((*x - self.mean[j]) / (self.var[j] + 1e-8).sqrt()).clamp(-self.clip, self.clip);
            }
        }
        out
    }
}

/// Gaussian actor over normalized actions and a state-value critic, sharing
/// one observation normalizer.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub obs_norm: RunningNormalizer,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        initial_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = |hidden: &[usize], out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let actor = DenseNet::new(
            &sizes(actor_hidden, action_dim),
            Activation::Elu,
            OutputHead::GaussianFreeStd,
            InitSpec {
                output_gain: 0.01,
                initial_log_std: initial_std.ln(),
                ..InitSpec::default()
            },
            rng,
        )?;
        let critic = DenseNet::new(
            &sizes(critic_hidden, 1),
            Activation::Elu,
            OutputHead::Deterministic,
            InitSpec::default(),
            rng,
        )?;
        Ok(ActorCritic {
            actor,
            critic,
            obs_norm: RunningNormalizer::new(obs_dim, 5.0),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_size()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_size()
    }

    pub fn normalize(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("observation", self.obs_dim(), raw.ncols())?;
        Ok(self.obs_norm.normalize_rows(raw))
    }

    /// `(mean, log_std)` per normalized observation row.
    pub fn distribution_rows(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.actor.gaussian_batch(obs)
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.critic.forward_batch(obs)?.column(0).to_owned())
    }

    /// Action distribution at one raw observation.
    pub fn distribution(&self, raw: &[f64]) -> Result<LatentGaussian> {
        let x = ArrayView2::from_shape((1, raw.len()), raw).map_err(|_| Error::Shape {
            context: "observation",
            expected: self.obs_dim(),
            got: raw.len(),
        })?;
        let obs = self.normalize(x)?;
        let (mean, log_std) = self.distribution_rows(obs.view())?;
        LatentGaussian::new(mean.row(0).to_vec(), log_std.row(0).mapv(f64::exp).to_vec())
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Draws `mean + std * eps` and returns it with its log-density.
pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let a: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(mean, log_std, &a);
    (a, lp)
}

/// Generalized advantage estimation over one environment's step sequence.
/// `dones[t]` cuts bootstrapping from step `t + 1`; `bootstrap` is the value
/// after the final step when that step is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("gae values", rewards.len(), values.len())?;
    check_len("gae dones", rewards.len(), dones.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let (next_value, next_adv) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (bootstrap, 0.0)
        } else {
            (values[t + 1], last)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        last = delta + gamma * lambda * next_adv;
        adv[t] = last;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Pessimistic clipped surrogate term for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Training batch: normalized observations, actions (normalized space),
/// behavior log-probabilities, advantages and returns.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub updates: usize,
    pub skipped: usize,
}

/// Optimizer state for both networks.
#[derive(Clone, Debug)]
pub struct PpoOptimizers {
    pub actor: Optimizer,
    pub critic: Optimizer,
}

impl PpoOptimizers {
    pub fn new(config: OptimizerConfig) -> Self {
        PpoOptimizers {
            actor: Optimizer::new(config),
            critic: Optimizer::new(config),
        }
    }
}

struct ActorLoss {
    loss: f64,
    surrogate: f64,
    entropy: f64,
    approx_kl: f64,
    clip_fraction: f64,
}

/// Records the actor loss `-mean(clipped surrogate) - c_ent * entropy` on `tape`.
fn actor_loss(
    net: &DenseNet,
    tape: &mut Tape,
    obs: Array2<f64>,
    actions: Array2<f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
    cfg: &PpoConfig,
) -> Result<(crate::nn::Var, ActorLoss)> {
    let b = obs.nrows();
    let d = net.output_size() as f64;
    let x = tape.constant(obs);
    let (mean, ls) = net.gaussian_tape(tape, x)?;
    let a = tape.constant(actions);
    let diff = tape.sub(a, mean)?;
    let neg_ls = tape.scale(ls, -1.0);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let per_dim = tape.sub(half, ls)?;
    let summed = tape.sum_cols(per_dim);
    let logp = tape.add_scalar(summed, -0.5 * d * LN_2PI);
    let old = tape.constant(Array2::from_shape_fn((b, 1), |(i, _)| old_log_probs[i]));
    let log_ratio = tape.sub(logp, old)?;
    let ratio = tape.exp(log_ratio);
    let adv = tape.constant(Array2::from_shape_fn((b, 1), |(i, _)| advantages[i]));
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(clipped, adv)?;
    let surr = tape.min(s1, s2)?;
    let surr_mean = tape.mean(surr);
    let ent_rows = tape.sum_cols(ls);
    let ent_mean = tape.mean(ent_rows);
    let entropy = tape.add_scalar(ent_mean, 0.5 * d * (1.0 + LN_2PI));
    let ent_term = tape.scale(entropy, -cfg.entropy_coef);
    let neg_surr = tape.scale(surr_mean, -1.0);
    let loss = tape.add(neg_surr, ent_term)?;

    let ratios = tape.value(ratio);
    let lr = tape.value(log_ratio);
    let approx_kl = lr.iter().zip(ratios.iter()).map(|(l, r)| (r - 1.0) - l).sum::<f64>() / b as f64;
    let clip_fraction = ratios.iter().filter(|r| (**r - 1.0).abs() > cfg.clip).count() as f64 / b as f64;
    Ok((
        loss,
        ActorLoss {
            loss: tape.scalar(loss),
            surrogate: tape.scalar(surr_mean),
            entropy: tape.scalar(entropy),
            approx_kl,
            clip_fraction,
        },
    ))
}

/// Mean clipped surrogate of `batch` under the current actor (no update).
pub fn surrogate_objective(policy: &ActorCritic, batch: &PpoBatch, cfg: &PpoConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, stats) = actor_loss(
        &policy.actor,
        &mut tape,
        batch.obs.clone(),
        batch.actions.clone(),
        &batch.log_probs,
        &batch.advantages,
        cfg,
    )?;
    Ok(stats.surrogate)
}

/// Several epochs of minibatch updates. Advantages are normalized over the
/// whole batch first; minibatches whose loss or gradient is non-finite are
/// skipped and counted.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut ActorCritic,
    opt: &mut PpoOptimizers,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_len("batch actions", batch.len(), batch.actions.nrows())?;
    check_len("batch observations", batch.len(), batch.obs.nrows())?;
    check_len("batch advantages", batch.len(), batch.advantages.len())?;
    check_len("batch returns", batch.len(), batch.returns.len())?;
    let mut adv = batch.advantages.clone();
    normalize_advantages(&mut adv);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb = cfg.minibatch.clamp(1, batch.len());
    let mut stats = PpoStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let obs = batch.obs.select(Axis(0), idx);
            let actions = batch.actions.select(Axis(0), idx);
            let old: Vec<f64> = idx.iter().map(|&i| batch.log_probs[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let ret = Array2::from_shape_fn((idx.len(), 1), |(i, _)| batch.returns[idx[i]]);

            let mut tape = Tape::new();
            let (loss, al) = actor_loss(&policy.actor, &mut tape, obs.clone(), actions, &old, &a, cfg)?;
            let mut ctape = Tape::new();
            let x = ctape.constant(obs);
            let v = policy.critic.forward_tape(&mut ctape, x)?;
            let r = ctape.constant(ret);
            let diff = ctape.sub(v, r)?;
            let sq = ctape.square(diff);
            let mse = ctape.mean(sq);
            let vloss = ctape.scale(mse, cfg.value_coef);
            let value_loss = ctape.scalar(mse);

            if !(al.loss.is_finite() && value_loss.is_finite()) {
                log::warn!("ppo minibatch skipped: non-finite loss (policy {}, value {value_loss})", al.loss);
                stats.skipped += 1;
                continue;
            }
            let mut ga = tape.backward(loss)?;
            let mut gc = ctape.backward(vloss)?;
            ga.clip_global_norm(cfg.max_grad_norm);
            gc.clip_global_norm(cfg.max_grad_norm);
            let stepped = opt
                .actor
                .step(policy.actor.params_mut(), &ga)
                .and_then(|_| opt.critic.step(policy.critic.params_mut(), &gc));
            if let Err(e) = stepped {
                log::warn!("ppo minibatch skipped: {e}");
                stats.skipped += 1;
                continue;
            }
            stats.policy_loss += -al.surrogate;
            stats.value_loss += value_loss;
            stats.entropy += al.entropy;
            stats.approx_kl += al.approx_kl;
            stats.clip_fraction += al.clip_fraction;
            stats.updates += 1;
        }
    }
    if stats.updates > 0 {
        let n = stats.updates as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.approx_kl /= n;
        stats.clip_fraction /= n;
    }
    Ok(stats)
}
