//! Reward terms and the joint-error termination schedule.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prior::{gaussian_kl, LatentGaussian};

/// Which way the mimic KL is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(z_target || z_sim).
    #[default]
    TargetToSim,
    /// KL(z_sim || z_target).
    SimToTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    /// Scale inside the mimic exponent.
    pub mimic_scale: f64,
    pub speed: f64,
    pub orientation: f64,
    pub angular: f64,
    /// Only the magnitude is used; the anchor reward always decays with divergence.
    pub anchor: f64,
    pub mimic_direction: KlDirection,
    /// Mixing coefficients of the total reward.
    pub mimic_coef: f64,
    pub task_coef: f64,
    pub anchor_coef: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            mimic_scale: 0.01,
            speed: -1.0,
            orientation: -1.0,
            angular: -0.5,
            anchor: 0.1,
            mimic_direction: KlDirection::TargetToSim,
            mimic_coef: 1.0,
            task_coef: 1.0,
            anchor_coef: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mimic_scale > 0.0) {
            return Err(Error::Config(format!("mimic scale must be positive, got {}", self.mimic_scale)));
        }
        for (name, w) in [("speed", self.speed), ("orientation", self.orientation), ("angular", self.angular)] {
            if w > 0.0 {
                return Err(Error::Config(format!("{name} weight must be a penalty (<= 0), got {w}")));
            }
        }
        Ok(())
    }
}

/// `exp(-w_r * KL(z_target || z_sim))`.
pub fn mimic_reward(z_target: &LatentGaussian, z_sim: &LatentGaussian, w_r: f64) -> Result<f64> {
    Ok((-w_r * gaussian_kl(z_target, z_sim)?).exp())
}

/// Mimic reward with the KL taken in `direction`.
pub fn mimic_reward_directed(
    z_target: &LatentGaussian,
    z_sim: &LatentGaussian,
    w_r: f64,
    direction: KlDirection,
) -> Result<f64> {
    match direction {
        KlDirection::TargetToSim => mimic_reward(z_target, z_sim, w_r),
        KlDirection::SimToTarget => mimic_reward(z_sim, z_target, w_r),
    }
}

/// Speed tracking plus orientation and angular-rate penalties. Only the
/// horizontal parts of `v`/`v_hat` and the x/y parts of the projected
/// gravity and angular velocity enter.
pub fn task_reward(v: &[f64; 3], v_hat: &[f64; 3], gravity: &[f64; 3], omega: &[f64; 3], w: &RewardWeights) -> f64 {
    let speed = (v[0] - v_hat[0]).hypot(v[1] - v_hat[1]);
    let tilt = gravity[0] * gravity[0] + gravity[1] * gravity[1];
    let spin = omega[0] * omega[0] + omega[1] * omega[1];
    w.speed * speed + w.orientation * tilt + w.angular * spin
}

/// `exp(-|w_anchor| * KL(current || style))`.
pub fn anchor_reward(current: &LatentGaussian, style: &LatentGaussian, w_anchor: f64) -> Result<f64> {
    Ok((-w_anchor.abs() * gaussian_kl(current, style)?).exp())
}

/// Largest absolute joint-angle difference, without angle wrapping.
pub fn joint_error(q_sim: &[f64], q_target: &[f64]) -> Result<f64> {
    check_len("joint_error", q_sim.len(), q_target.len())?;
    Ok(q_sim.iter().zip(q_target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Linear ramp of the joint-error termination threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSchedule {
    pub start: f64,
    pub end: f64,
    /// Training iterations to go from `start` to `end`.
    pub ramp: u64,
}

impl Default for ToleranceSchedule {
    fn default() -> Self {
        ToleranceSchedule {
            start: 0.5,
            end: TAU,
            ramp: 500,
        }
    }
}

impl ToleranceSchedule {
    pub fn current_threshold(&self, iteration: u64) -> f64 {
        let frac = if self.ramp == 0 {
            1.0
        } else {
            (iteration as f64 / self.ramp as f64).min(1.0)
        };
        self.start + frac * (self.end - self.start)
    }

    pub fn should_terminate(&self, joint_error: f64, iteration: u64) -> bool {
        joint_error > self.current_threshold(iteration)
    }
}

/// Per-step reward breakdown. Terms a stage does not use are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub mimic: f64,
    pub task: Option<f64>,
    pub anchor: Option<f64>,
}

impl RewardTerms {
    pub fn total(&self, w: &RewardWeights) -> f64 {
        w.mimic_coef * self.mimic + w.task_coef * self.task.unwrap_or(0.0) + w.anchor_coef * self.anchor.unwrap_or(0.0)
    }
}
