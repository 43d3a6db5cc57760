//! Flat feature vectors for motion windows.
//!
//! Each frame contributes `[p - p_last (3) | theta (4) | v (6) | q (n) | q_dot (n)]`
//! where `p_last` is the base position of the window's final frame and the
//! quaternion is sign-canonicalized to `w >= 0`. Windows concatenate their
//! frames oldest first.

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::motion::{MotionFrame, MotionWindow};

pub fn frame_dim(joints: usize) -> usize {
    13 + 2 * joints
}

pub fn window_dim(history: usize, joints: usize) -> usize {
    (history + 1) * frame_dim(joints)
}

fn push_frame(out: &mut Vec<f64>, f: &MotionFrame, anchor: &[f64; 3]) {
    out.extend((0..3).map(|i| f.p[i] - anchor[i]));
    let sign = if f.theta[0] < 0.0 { -1.0 } else { 1.0 };
    out.extend(f.theta.iter().map(|x| sign * x));
    out.extend_from_slice(&f.v);
    out.extend_from_slice(&f.q);
    out.extend_from_slice(&f.q_dot);
}

/// Raw (unnormalized) features of a sequence of frames, relative to the last.
pub fn frames_features(frames: &[MotionFrame]) -> Vec<f64> {
    let Some(last) = frames.last() else {
        return Vec::new();
    };
    let anchor = last.p;
    let mut out = Vec::with_capacity(frames.len() * frame_dim(last.joint_count()));
    for f in frames {
        push_frame(&mut out, f, &anchor);
    }
    out
}

pub fn window_features(window: &MotionWindow) -> Vec<f64> {
    frames_features(&window.frames)
}

/// Inverse of [`frames_features`], placing the final frame's base at `anchor`.
/// Quaternions are renormalized.
pub fn features_to_window(
    features: &[f64],
    joints: usize,
    frame_rate: f64,
    anchor: [f64; 3],
) -> Result<MotionWindow> {
    let fd = frame_dim(joints);
    if features.is_empty() || features.len() % fd != 0 {
        return Err(Error::Shape {
            context: "window features",
            expected: fd * (features.len() / fd).max(1),
            got: features.len(),
        });
    }
    let frames = features
        .chunks(fd)
        .map(|c| {
            let rot = UnitQuaternion::from_quaternion(Quaternion::new(c[3], c[4], c[5], c[6]));
            let mut f = MotionFrame {
                p: [c[0] + anchor[0], c[1] + anchor[1], c[2] + anchor[2]],
                theta: [1.0, 0.0, 0.0, 0.0],
                v: [c[7], c[8], c[9], c[10], c[11], c[12]],
                q: c[13..13 + joints].to_vec(),
                q_dot: c[13 + joints..].to_vec(),
            };
            f.set_orientation(&rot);
            f
        })
        .collect();
    Ok(MotionWindow { frames, frame_rate })
}

/// Per-feature affine normalization with a floor on the scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>], std_floor: f64) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyDataset);
        };
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            check_len("normalizer row", dim, r.len())?;
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(std_floor)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }
}
