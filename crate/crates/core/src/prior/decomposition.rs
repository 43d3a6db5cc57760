//! Exact check of the chain-rule split of a divergence through a shared
//! stochastic encoder on finite supports.
//!
//! With joint laws `P(x, z) = P(x) q(z | x)` for both the reference and the
//! policy, the full divergence `KL(P_ref(X,Z) || P_pi(X,Z))` equals the
//! marginal latent divergence `KL(P_ref(Z) || P_pi(Z))` plus the expected
//! conditional divergence `E_{z ~ P_ref(Z)} KL(P_ref(X|z) || P_pi(X|z))`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub total: f64,
    pub marginal: f64,
    pub conditional: f64,
}

fn validate_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `p ln(p / q)` with the `0 ln 0 = 0` convention.
#[inline]
fn plogp(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Splits `KL(P_ref || P_pi)` on `X` through the channel `channel[x][z] = q(z | x)`.
///
/// Returns [`Error::InfiniteDivergence`] when the reference puts mass where
/// the policy puts none.
pub fn verify_decomposition(p_ref: &[f64], p_pi: &[f64], channel: &[Vec<f64>]) -> Result<Decomposition> {
    let nx = p_ref.len();
    if p_pi.len() != nx || channel.len() != nx || nx == 0 {
        return Err(Error::Shape {
            context: "decomposition supports",
            expected: nx,
            got: p_pi.len().min(channel.len()),
        });
    }
    validate_distribution("P_ref", p_ref)?;
    validate_distribution("P_pi", p_pi)?;
    let nz = channel[0].len();
    for (x, row) in channel.iter().enumerate() {
        if row.len() != nz {
            return Err(Error::Shape {
                context: "channel row",
                expected: nz,
                got: row.len(),
            });
        }
        validate_distribution(&format!("q(.|x={x})"), row)?;
    }
    if let Some(index) = (0..nx).find(|&x| p_ref[x] > 0.0 && p_pi[x] == 0.0) {
        return Err(Error::InfiniteDivergence { index });
    }

    // full divergence by summation over the joint support
    let mut total = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            let a = p_ref[x] * channel[x][z];
            let b = p_pi[x] * channel[x][z];
            total += plogp(a, b);
        }
    }

    let marg = |p: &[f64], z: usize| -> f64 { (0..nx).map(|x| p[x] * channel[x][z]).sum() };
    let mut marginal = 0.0;
    let mut conditional = 0.0;
    for z in 0..nz {
        let rz = marg(p_ref, z);
        let pz = marg(p_pi, z);
        marginal += plogp(rz, pz);
        if rz == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for x in 0..nx {
            let a = p_ref[x] * channel[x][z] / rz;
            let b = p_pi[x] * channel[x][z] / pz;
            inner += plogp(a, b);
        }
        conditional += rz * inner;
    }
    Ok(Decomposition {
        total,
        marginal,
        conditional,
    })
}
