use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One kinematic frame: base pose, base twist and joint state.
///
/// `theta` is a unit quaternion stored as `[w, x, y, z]`; `v` holds the
/// world-frame linear velocity followed by the world-frame angular velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFrame {
    pub p: [f64; 3],
    pub theta: [f64; 4],
    pub v: [f64; 6],
    pub q: Vec<f64>,
    pub q_dot: Vec<f64>,
}

pub const QUATERNION_TOLERANCE: f64 = 1e-6;

impl MotionFrame {
    pub fn joint_count(&self) -> usize {
        self.q.len()
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.theta;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }

    pub fn set_orientation(&mut self, q: &UnitQuaternion<f64>) {
        let q = q.quaternion();
        self.theta = [q.w, q.i, q.j, q.k];
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "orientation quaternion has norm {norm}"
            )));
        }
        if self.q.len() != self.q_dot.len() {
            return Err(Error::InvalidArgument(format!(
                "{} joint angles but {} joint velocities",
                self.q.len(),
                self.q_dot.len()
            )));
        }
        let finite = self
            .p
            .iter()
            .chain(&self.theta)
            .chain(&self.v)
            .chain(&self.q)
            .chain(&self.q_dot)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite frame component".into()));
        }
        Ok(())
    }

    /// The same instant played backwards: velocities change sign.
    pub fn time_reversed(&self) -> Self {
        let mut f = self.clone();
        f.v.iter_mut().for_each(|x| *x = -*x);
        f.q_dot.iter_mut().for_each(|x| *x = -*x);
        f
    }
}

/// `w + 1` consecutive frames ending at the current time step.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWindow {
    pub frames: Vec<MotionFrame>,
    pub frame_rate: f64,
}

impl MotionWindow {
    pub fn history(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn last(&self) -> &MotionFrame {
        self.frames.last().expect("non-empty window")
    }
}

/// Reverses a sequence in time: frame `k` of the result is frame `K-1-k` of
/// the input with velocities negated.
pub fn reverse_frames(frames: &[MotionFrame]) -> Vec<MotionFrame> {
    frames.iter().rev().map(MotionFrame::time_reversed).collect()
}

/// Sliding windows of `w + 1` frames; window `i` covers frames `i..=i + w`.
pub fn make_windows(frames: &[MotionFrame], w: usize, frame_rate: f64) -> Vec<MotionWindow> {
    if frames.len() < w + 1 {
        return Vec::new();
    }
    frames
        .windows(w + 1)
        .map(|f| MotionWindow {
            frames: f.to_vec(),
            frame_rate,
        })
        .collect()
}
