//! Leg geometry of the default quadruped: forward kinematics, the foot
//! Jacobian and an analytic three-joint inverse kinematics solve.
//!
//! Each leg has hip abduction (about body x), hip flexion and knee flexion
//! (both about the abducted y axis). Legs are ordered FL, FR, RL, RR and
//! joints are stored leg-major: `q[3 * leg + joint]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub const NUM_LEGS: usize = 4;
pub const JOINTS_PER_LEG: usize = 3;
pub const NUM_JOINTS: usize = NUM_LEGS * JOINTS_PER_LEG;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leg {
    FrontLeft = 0,
    FrontRight = 1,
    RearLeft = 2,
    RearRight = 3,
}

impl Leg {
    pub const ALL: [Leg; 4] = [Leg::FrontLeft, Leg::FrontRight, Leg::RearLeft, Leg::RearRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_left(self) -> bool {
        matches!(self, Leg::FrontLeft | Leg::RearLeft)
    }

    pub fn is_front(self) -> bool {
        matches!(self, Leg::FrontLeft | Leg::FrontRight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Morphology {
    pub body_length: f64,
    pub body_width: f64,
    pub hip_length: f64,
    pub thigh_length: f64,
    pub calf_length: f64,
    /// Nominal standing joint angles for one leg (abduction, hip, knee).
    pub default_leg_pose: [f64; 3],
    pub joint_lower: [f64; 3],
    pub joint_upper: [f64; 3],
}

impl Default for Morphology {
    fn default() -> Self {
        Morphology {
            body_length: 0.4,
            body_width: 0.2,
            hip_length: 0.08,
            thigh_length: 0.21,
            calf_length: 0.21,
            default_leg_pose: [0.0, 0.8, -1.5],
            joint_lower: [-0.8, -1.0, -2.7],
            joint_upper: [0.8, 2.6, -0.5],
        }
    }
}

impl Morphology {
    /// Hip joint position in the base frame.
    pub fn hip_offset(&self, leg: Leg) -> Vector3<f64> {
        let x = if leg.is_front() { 0.5 } else { -0.5 } * self.body_length;
        let y = if leg.is_left() { 0.5 } else { -0.5 } * self.body_width;
        Vector3::new(x, y, 0.0)
    }

    /// Signed lateral hip segment (positive on the left).
    fn lateral(&self, leg: Leg) -> f64 {
        if leg.is_left() {
            self.hip_length
        } else {
            -self.hip_length
        }
    }

    pub fn default_pose(&self) -> [f64; NUM_JOINTS] {
        let mut q = [0.0; NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            q[3 * leg..3 * leg + 3].copy_from_slice(&self.default_leg_pose);
        }
        q
    }

    pub fn clamp_joint(&self, joint: usize, value: f64) -> f64 {
        let j = joint % JOINTS_PER_LEG;
        value.clamp(self.joint_lower[j], self.joint_upper[j])
    }

    /// Foot position relative to the hip, in the base frame.
    pub fn foot_in_hip(&self, leg: Leg, q: &[f64]) -> Vector3<f64> {
        let (l1, l2, l3) = (self.lateral(leg), self.thigh_length, self.calf_length);
        let (s0, c0) = q[0].sin_cos();
        let (s1, c1) = q[1].sin_cos();
        let (s12, c12) = (q[1] + q[2]).sin_cos();
        let x = -l2 * s1 - l3 * s12;
        let zp = -l2 * c1 - l3 * c12;
        Vector3::new(x, l1 * c0 - zp * s0, l1 * s0 + zp * c0)
    }

    pub fn foot_in_base(&self, leg: Leg, q: &[f64]) -> Vector3<f64> {
        self.hip_offset(leg) + self.foot_in_hip(leg, q)
    }

    /// d(foot_in_base) / d(q_leg), columns ordered as the leg's joints.
    pub fn foot_jacobian(&self, leg: Leg, q: &[f64]) -> Matrix3<f64> {
        let (l1, l2, l3) = (self.lateral(leg), self.thigh_length, self.calf_length);
        let (s0, c0) = q[0].sin_cos();
        let (s1, c1) = q[1].sin_cos();
        let (s12, c12) = (q[1] + q[2]).sin_cos();
        let x = -l2 * s1 - l3 * s12;
        let zp = -l2 * c1 - l3 * c12;
        let y = l1 * c0 - zp * s0;
        let z = l1 * s0 + zp * c0;
        let dx = [zp, -l3 * c12];
        let dzp = [-x, l3 * s12];
        Matrix3::new(
            0.0,
            dx[0],
            dx[1],
            -z,
            -s0 * dzp[0],
            -s0 * dzp[1],
            y,
            c0 * dzp[0],
            c0 * dzp[1],
        )
    }

    /// Joint angles placing the foot at `target` (relative to the hip, base
    /// frame), knee bent backwards. Unreachable targets are projected onto
    /// the reachable shell.
    pub fn leg_ik(&self, leg: Leg, target: &Vector3<f64>) -> [f64; 3] {
        let (l1, l2, l3) = (self.lateral(leg), self.thigh_length, self.calf_length);
        let (x, y, z) = (target.x, target.y, target.z);
        let r_yz2 = (y * y + z * z - l1 * l1).max(1e-12);
        let zp = -r_yz2.sqrt();
        let q0 = z.atan2(y) - zp.atan2(l1);
        let reach = (l2 + l3) - 1e-9;
        let mut r2 = x * x + zp * zp;
        let (mut x, mut zp) = (x, zp);
        if r2.sqrt() > reach {
            let s = reach / r2.sqrt();
            x *= s;
            zp *= s;
            r2 = reach * reach;
        }
        let cos_knee = ((r2 - l2 * l2 - l3 * l3) / (2.0 * l2 * l3)).clamp(-1.0, 1.0);
        let q2 = -cos_knee.acos();
        let a = l2 + l3 * q2.cos();
        let b = l3 * q2.sin();
        let q1 = (-x).atan2(-zp) - b.atan2(a);
        [wrap(q0), q1, q2]
    }
}

fn wrap(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}
