use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian given by per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_len("gaussian std", mean.len(), std.len())?;
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "standard deviation must be positive and finite, got {s}"
            )));
        }
        Ok(LatentGaussian { mean, std })
    }

    /// Unchecked constructor for values already known to be valid.
    pub(crate) fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), std.len());
        LatentGaussian { mean, std }
    }

    pub fn standard(dim: usize) -> Self {
        LatentGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }
}

/// Per-dimension KL(N(ma, sa^2) || N(mb, sb^2)).
#[inline]
pub fn kl_term(ma: f64, sa: f64, mb: f64, sb: f64) -> f64 {
    let d = ma - mb;
    (sb / sa).ln() + (sa * sa + d * d) / (2.0 * sb * sb) - 0.5
}

/// Closed-form KL(a || b) between diagonal Gaussians.
pub fn gaussian_kl(a: &LatentGaussian, b: &LatentGaussian) -> Result<f64> {
    check_len("gaussian_kl", a.dim(), b.dim())?;
    for s in a.std.iter().chain(&b.std) {
        if !(*s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "non-positive standard deviation {s}"
            )));
        }
    }
    Ok(a.mean
        .iter()
        .zip(&a.std)
        .zip(b.mean.iter().zip(&b.std))
        .map(|((&ma, &sa), (&mb, &sb))| kl_term(ma, sa, mb, sb))
        .sum::<f64>()
        .max(0.0))
}

/// KL(a || b) + KL(b || a).
pub fn symmetric_kl(a: &LatentGaussian, b: &LatentGaussian) -> Result<f64> {
    Ok(gaussian_kl(a, b)? + gaussian_kl(b, a)?)
}
