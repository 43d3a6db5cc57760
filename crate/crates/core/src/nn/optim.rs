use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Param, ParamId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            rule: UpdateRule::Adam,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            rule: UpdateRule::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Optimizer state: step counter plus per-parameter first/second moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Array2<f64>, Array2<f64>)> {
        self.moments.get(&id)
    }

    /// Applies one update to `params`. Parameters missing from `grads` see a
    /// zero gradient. Nothing is modified if any gradient is non-finite or
    /// has the wrong shape.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &Gradients) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.get(p.id()) {
                if g.dim() != p.value.dim() {
                    return Err(Error::Shape {
                        context: "optimizer gradient",
                        expected: p.value.len(),
                        got: g.len(),
                    });
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                    });
                }
            }
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as f64;
        for p in params {
            let g = grads.get_or_zeros(p);
            match cfg.rule {
                UpdateRule::Sgd => {
                    p.value.scaled_add(-cfg.learning_rate, &g);
                }
                UpdateRule::Adam => {
                    let (m, v) = self.moments.entry(p.id()).or_insert_with(|| {
                        (Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim()))
                    });
                    let bc1 = 1.0 - cfg.beta1.powf(t);
                    let bc2 = 1.0 - cfg.beta2.powf(t);
                    Zip::from(&mut p.value)
                        .and(m)
                        .and(v)
                        .and(&g)
                        .for_each(|w, m, v, &g| {
                            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                        });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::array;

    fn grads_for(p: &Param, g: f64) -> Gradients {
        // loss = g * p
        let mut tape = Tape::new();
        let pv = tape.param(p);
        let s = tape.sum(pv);
        let loss = tape.scale(s, g);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts() {
        let mut p = Param::new("p", array![[1.0, -2.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let g = grads_for(&p, 0.0);
        opt.step(vec![&mut p], &g).unwrap();
        assert_eq!(p.value, array![[1.0, -2.0]]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = Param::new("p", array![[0.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        let g = grads_for(&p, 1.0);
        opt.step(vec![&mut p], &g).unwrap();
        assert!((p.value[[0, 0]] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_two_step_trace() {
        // Hand trace with g = 1, lr = 0.1: both bias-corrected steps equal
        // -lr * 1 / (1 + eps).
        let mut p = Param::new("p", array![[0.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        let g = grads_for(&p, 1.0);
        opt.step(vec![&mut p], &g).unwrap();
        let first = p.value[[0, 0]];
        assert!((first - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        opt.step(vec![&mut p], &g).unwrap();
        let second = p.value[[0, 0]];
        assert!(second < first);
        assert!((second - (-0.2 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(opt.step_count(), 2);
        let (m, v) = opt.moments(p.id()).unwrap();
        assert_eq!(m.dim(), p.value.dim());
        assert_eq!(v.dim(), p.value.dim());
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = Param::new("trunk.weight", array![[0.5]]);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let g = grads_for(&p, f64::NAN);
        let err = opt.step(vec![&mut p], &g).unwrap_err();
        assert!(err.to_string().contains("trunk.weight"));
        assert_eq!(p.value[[0, 0]], 0.5);
        assert_eq!(opt.step_count(), 0);
    }
}
