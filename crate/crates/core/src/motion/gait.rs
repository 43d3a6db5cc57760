//! Procedural reference gaits.
//!
//! Feet follow a stance/swing cycle in the world: planted feet stay fixed
//! on the ground while the base advances at constant speed, swing feet move
//! forward on a half-sine lift profile. The base carries a small
//! style-dependent bob and sway. Joint angles come from solving leg IK for
//! the world-frame foot targets, and every velocity is the backward finite
//! difference of the corresponding pose at the frame rate.

use std::fmt;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::frame::{reverse_frames, MotionFrame};
use super::kinematics::{Leg, Morphology, NUM_JOINTS, NUM_LEGS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitStyle {
    Pace,
    PaceBackwards,
    Trot,
    TrotBackwards,
}

impl GaitStyle {
    pub const ALL: [GaitStyle; 4] = [
        GaitStyle::Pace,
        GaitStyle::PaceBackwards,
        GaitStyle::Trot,
        GaitStyle::TrotBackwards,
    ];

    pub fn is_backwards(self) -> bool {
        matches!(self, GaitStyle::PaceBackwards | GaitStyle::TrotBackwards)
    }

    pub fn forward_counterpart(self) -> GaitStyle {
        match self {
            GaitStyle::Pace | GaitStyle::PaceBackwards => GaitStyle::Pace,
            GaitStyle::Trot | GaitStyle::TrotBackwards => GaitStyle::Trot,
        }
    }

    /// +1 for forward styles, -1 for backwards ones.
    pub fn direction(self) -> f64 {
        if self.is_backwards() {
            -1.0
        } else {
            1.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GaitStyle::Pace => "pace",
            GaitStyle::PaceBackwards => "pace_backwards",
            GaitStyle::Trot => "trot",
            GaitStyle::TrotBackwards => "trot_backwards",
        }
    }
}

impl fmt::Display for GaitStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GaitStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GaitStyle::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gait style `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitSpec {
    pub style: GaitStyle,
    /// Forward speed of the base in m/s (the backwards styles replay the
    /// forward motion, so this is always positive).
    pub base_speed: f64,
    pub stride_frequency: f64,
    pub duty_factor: f64,
    /// Per-leg phase in `[0, 1)`, ordered FL, FR, RL, RR.
    pub phase_offsets: [f64; 4],
    pub swing_height: f64,
    pub body_height: f64,
}

impl GaitSpec {
    pub fn pace() -> Self {
        GaitSpec {
            style: GaitStyle::Pace,
            base_speed: 0.9,
            stride_frequency: 2.0,
            duty_factor: 0.5,
            phase_offsets: [0.0, 0.5, 0.0, 0.5],
            swing_height: 0.08,
            body_height: 0.28,
        }
    }

    pub fn trot() -> Self {
        GaitSpec {
            style: GaitStyle::Trot,
            base_speed: 1.6,
            stride_frequency: 3.0,
            duty_factor: 0.5,
            phase_offsets: [0.0, 0.5, 0.5, 0.0],
            swing_height: 0.08,
            body_height: 0.28,
        }
    }

    pub fn for_style(style: GaitStyle) -> Self {
        let mut spec = match style.forward_counterpart() {
            GaitStyle::Pace => Self::pace(),
            _ => Self::trot(),
        };
        spec.style = style;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duty_factor > 0.0 && self.duty_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "duty factor {} outside (0, 1)",
                self.duty_factor
            )));
        }
        if !(self.base_speed > 0.0) || !(self.stride_frequency > 0.0) {
            return Err(Error::InvalidArgument(
                "base speed and stride frequency must be positive".into(),
            ));
        }
        if self.phase_offsets.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::InvalidArgument("phase offsets must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn stride_length(&self) -> f64 {
        self.base_speed * self.duty_factor / self.stride_frequency
    }

    fn leg_phase(&self, leg: Leg, t: f64) -> f64 {
        (self.stride_frequency * t + self.phase_offsets[leg.index()]).rem_euclid(1.0)
    }

    /// Which feet are planted at time `t` of the forward motion.
    pub fn contacts(&self, t: f64) -> [bool; NUM_LEGS] {
        let mut c = [false; NUM_LEGS];
        for leg in Leg::ALL {
            c[leg.index()] = self.leg_phase(leg, t) < self.duty_factor;
        }
        c
    }

    fn base_pose(&self, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let w = std::f64::consts::TAU * self.stride_frequency * t;
        match self.style.forward_counterpart() {
            GaitStyle::Pace => (
                Vector3::new(self.base_speed * t, 0.012 * w.sin(), self.body_height + 0.004 * (2.0 * w).cos()),
                UnitQuaternion::from_euler_angles(0.06 * w.sin(), 0.0, 0.0),
            ),
            _ => (
                Vector3::new(self.base_speed * t, 0.0, self.body_height - 0.006 * (2.0 * w).cos()),
                UnitQuaternion::from_euler_angles(0.0, 0.02 * (2.0 * w).sin(), 0.0),
            ),
        }
    }

    /// Foot position relative to its hip, expressed in the heading frame.
    fn foot_offset(&self, leg: Leg, t: f64) -> (f64, f64) {
        let s = self.leg_phase(leg, t);
        let l = self.stride_length();
        let d = self.duty_factor;
        if s < d {
            (0.5 * l - l * s / d, 0.0)
        } else {
            let u = (s - d) / (1.0 - d);
            let x = -0.5 * l + l * 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            (x, self.swing_height * (std::f64::consts::PI * u).sin())
        }
    }

    fn pose(&self, morph: &Morphology, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>, [f64; NUM_JOINTS]) {
        let (p, rot) = self.base_pose(t);
        let mut q = [0.0; NUM_JOINTS];
        for leg in Leg::ALL {
            let hip = morph.hip_offset(leg);
            let lateral = if leg.is_left() { morph.hip_length } else { -morph.hip_length };
            let (dx, lift) = self.foot_offset(leg, t);
            let foot_world = Vector3::new(p.x + hip.x + dx, hip.y + lateral, lift);
            let in_base = rot.inverse_transform_vector(&(foot_world - p));
            let sol = morph.leg_ik(leg, &(in_base - hip));
            q[3 * leg.index()..3 * leg.index() + 3].copy_from_slice(&sol);
        }
        (p, rot, q)
    }
}

/// Synthesizes `round(duration * frame_rate)` frames of the requested gait.
pub fn generate_gait(spec: &GaitSpec, duration: f64, frame_rate: f64) -> Result<Vec<MotionFrame>> {
    spec.validate()?;
    if !(duration > 0.0) || !(frame_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "duration and frame rate must be positive".into(),
        ));
    }
    let morph = Morphology::default();
    let count = (duration * frame_rate).round() as usize;
    let dt = 1.0 / frame_rate;
    let mut prev = spec.pose(&morph, -dt);
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let cur = spec.pose(&morph, k as f64 * dt);
        let lin = (cur.0 - prev.0) * frame_rate;
        let ang = (cur.1 * prev.1.inverse()).scaled_axis() * frame_rate;
        let q_dot: Vec<f64> = cur.2.iter().zip(&prev.2).map(|(a, b)| (a - b) * frame_rate).collect();
        let mut frame = MotionFrame {
            p: [cur.0.x, cur.0.y, cur.0.z],
            theta: [1.0, 0.0, 0.0, 0.0],
            v: [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z],
            q: cur.2.to_vec(),
            q_dot,
        };
        frame.set_orientation(&cur.1);
        frames.push(frame);
        prev = cur;
    }
    if spec.style.is_backwards() {
        frames = reverse_frames(&frames);
    }
    Ok(frames)
}

/// Foot-contact flags for each generated frame, in the same order as
/// [`generate_gait`] returns them.
pub fn contact_schedule(spec: &GaitSpec, duration: f64, frame_rate: f64) -> Vec<[bool; NUM_LEGS]> {
    let count = (duration * frame_rate).round() as usize;
    let mut c: Vec<_> = (0..count).map(|k| spec.contacts(k as f64 / frame_rate)).collect();
    if spec.style.is_backwards() {
        c.reverse();
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pace_displacement() {
        let frames = generate_gait(&GaitSpec::pace(), 10.0, 50.0).unwrap();
        assert_eq!(frames.len(), 500);
        let dx = frames[499].p[0] - frames[0].p[0];
        assert!((dx - 9.0).abs() <= 0.05 * 9.0, "dx = {dx}");
    }

    #[test]
    fn trot_displacement() {
        let frames = generate_gait(&GaitSpec::trot(), 10.0, 50.0).unwrap();
        let dx = frames[499].p[0] - frames[0].p[0];
        assert!((dx - 16.0).abs() <= 0.05 * 16.0, "dx = {dx}");
    }

    #[test]
    fn backwards_is_time_reversed_forward() {
        let fwd = generate_gait(&GaitSpec::trot(), 4.0, 50.0).unwrap();
        let bwd = generate_gait(&GaitSpec::for_style(GaitStyle::TrotBackwards), 4.0, 50.0).unwrap();
        let k_max = fwd.len();
        for k in 0..k_max {
            let f = &fwd[k_max - 1 - k];
            let b = &bwd[k];
            assert_eq!(b.p, f.p);
            assert_eq!(b.theta, f.theta);
            assert_eq!(b.q, f.q);
            for i in 0..6 {
                assert_eq!(b.v[i], -f.v[i]);
            }
            for i in 0..12 {
                assert_eq!(b.q_dot[i], -f.q_dot[i]);
            }
        }
    }

    #[test]
    fn joint_velocity_is_finite_difference() {
        let frame_rate = 50.0;
        let frames = generate_gait(&GaitSpec::pace(), 6.0, frame_rate).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for k in 1..frames.len() {
            for j in 0..12 {
                let fd = (frames[k].q[j] - frames[k - 1].q[j]) * frame_rate;
                total += (frames[k].q_dot[j] - fd).abs();
                count += 1;
            }
        }
        assert!(total / (count as f64) < 1e-6);
    }

    #[test]
    fn frames_are_valid_and_feet_stay_above_ground() {
        let morph = Morphology::default();
        for style in GaitStyle::ALL {
            let frames = generate_gait(&GaitSpec::for_style(style), 3.0, 50.0).unwrap();
            for f in &frames {
                f.validate().unwrap();
                let rot = f.orientation();
                let p = Vector3::from(f.p);
                for leg in Leg::ALL {
                    let q = &f.q[3 * leg.index()..3 * leg.index() + 3];
                    for (j, v) in q.iter().enumerate() {
                        assert!(*v >= morph.joint_lower[j] && *v <= morph.joint_upper[j], "{style} joint {j} = {v}");
                    }
                    let foot = p + rot * morph.foot_in_base(leg, q);
                    assert!(foot.z > -1e-9, "{style}: foot below ground {}", foot.z);
                }
            }
        }
    }

    #[test]
    fn phase_pairing() {
        let pace = contact_schedule(&GaitSpec::pace(), 10.0, 50.0);
        assert!(pace.iter().all(|c| c[Leg::FrontLeft.index()] == c[Leg::RearLeft.index()]));
        assert!(pace.iter().any(|c| c[0] != c[1]));
        let trot = contact_schedule(&GaitSpec::trot(), 10.0, 50.0);
        assert!(trot.iter().all(|c| c[Leg::FrontLeft.index()] == c[Leg::RearRight.index()]));
        assert!(trot.iter().any(|c| c[0] != c[1]));
    }

    #[test]
    fn bad_duty_factor_rejected() {
        let mut spec = GaitSpec::trot();
        spec.duty_factor = 1.0;
        assert!(generate_gait(&spec, 1.0, 50.0).is_err());
        spec.duty_factor = 0.0;
        assert!(generate_gait(&spec, 1.0, 50.0).is_err());
    }

    #[test]
    fn style_names_round_trip() {
        for s in GaitStyle::ALL {
            assert_eq!(s.as_str().parse::<GaitStyle>().unwrap(), s);
        }
    }
}
