//! Floating-base quadruped with massless legs over a heightfield.
//!
//! The base is a single rigid body. Each joint follows second-order dynamics
//! driven by a PD motor torque plus the load from its foot's ground reaction,
//! and the ground reaction itself is a spring-damper along the terrain
//! normal with an anchored tangential spring capped by Coulomb friction.
//! Each physics step is integrated in several sub-steps, with the PD law
//! re-evaluated at every sub-step.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::randomization::DomainRandomization;
use super::terrain::HeightField;
use crate::error::{Error, Result};
use crate::motion::{Leg, MotionFrame, Morphology, NUM_JOINTS, NUM_LEGS};

pub const PROP_DIM: usize = 9;
/// IMU (projected gravity, angular velocity), previous action, q, q_dot.
pub const HISTORY_WIDTH: usize = 6 + 3 * NUM_JOINTS;

/// Largest upward shift applied at reset to clear the terrain.
const MAX_RESET_LIFT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub control_frequency: f64,
    pub physics_substeps: usize,
    /// Integration steps per physics step.
    pub contact_substeps: usize,
    pub gravity: f64,
    pub base_mass: f64,
    /// Principal moments of the base about its center of mass, kg m^2.
    pub base_inertia: [f64; 3],
    pub joint_inertia: f64,
    /// Passive viscous friction of each joint, N m s/rad.
    pub joint_damping: f64,
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub history_len: usize,
    /// Base height above the terrain below which the robot has fallen.
    pub fall_height: f64,
    pub morphology: Morphology,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            control_frequency: 50.0,
            physics_substeps: 4,
            contact_substeps: 8,
            gravity: 9.81,
            base_mass: 8.0,
            base_inertia: [0.035, 0.11, 0.13],
            joint_inertia: 0.01,
            joint_damping: 0.5,
            kp: 20.0,
            kd: 0.5,
            torque_limit: 23.7,
            contact_stiffness: 2e4,
            contact_damping: 200.0,
            tangential_stiffness: 5e3,
            tangential_damping: 100.0,
            history_len: 5,
            fall_height: 0.05,
            morphology: Morphology::default(),
        }
    }
}

impl SimConfig {
    pub fn physics_frequency(&self) -> f64 {
        self.control_frequency * self.physics_substeps as f64
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_frequency
    }

    pub fn observation_dim(&self, latent_dim: usize) -> usize {
        PROP_DIM + self.history_len * HISTORY_WIDTH + latent_dim
    }

    /// Physics steps of observation delay for a latency in seconds.
    pub fn latency_steps(&self, latency: f64) -> usize {
        (latency * self.physics_frequency()).round().max(0.0) as usize
    }
}

/// PD motor torque for one joint, clamped to `limit`.
pub fn pd_torque(kp: f64, kd: f64, motor: f64, target: f64, q: f64, q_dot: f64, limit: f64) -> f64 {
    (motor * (kp * (target - q) - kd * q_dot)).clamp(-limit, limit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
    /// World-frame linear velocity of the base origin.
    pub linear_velocity: [f64; 3],
    /// World-frame angular velocity.
    pub angular_velocity: [f64; 3],
    pub q: [f64; NUM_JOINTS],
    pub q_dot: [f64; NUM_JOINTS],
    pub contacts: [bool; NUM_LEGS],
    pub time: f64,
}

impl RobotState {
    pub fn to_frame(&self) -> MotionFrame {
        MotionFrame {
            p: self.position,
            theta: self.orientation,
            v: [
                self.linear_velocity[0],
                self.linear_velocity[1],
                self.linear_velocity[2],
                self.angular_velocity[0],
                self.angular_velocity[1],
                self.angular_velocity[2],
            ],
            q: self.q.to_vec(),
            q_dot: self.q_dot.to_vec(),
        }
    }
}

/// Proprioceptive reading as seen by the policy (possibly delayed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sensors {
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub projected_gravity: [f64; 3],
    pub q: [f64; NUM_JOINTS],
    pub q_dot: [f64; NUM_JOINTS],
}

impl Sensors {
    pub fn prop(&self) -> [f64; PROP_DIM] {
        let mut o = [0.0; PROP_DIM];
        o[..3].copy_from_slice(&self.linear_velocity);
        o[3..6].copy_from_slice(&self.angular_velocity);
        o[6..].copy_from_slice(&self.projected_gravity);
        o
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub prop: [f64; PROP_DIM],
    /// Newest entry first, `history_len * HISTORY_WIDTH` values.
    pub history: Vec<f64>,
    pub target: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        PROP_DIM + self.history.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[prop | history | target]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.prop);
        v.extend_from_slice(&self.history);
        v.extend_from_slice(&self.target);
        v
    }
}

/// Builds the policy observation from the delayed sensors, the flattened
/// history and the target latent mean.
pub fn assemble_observation(sensors: &Sensors, history: &[f64], z_target: &[f64], latent_dim: usize) -> Result<Observation> {
    if z_target.len() != latent_dim {
        return Err(Error::Shape {
            context: "target latent",
            expected: latent_dim,
            got: z_target.len(),
        });
    }
    if history.len() % HISTORY_WIDTH != 0 {
        return Err(Error::Shape {
            context: "observation history",
            expected: HISTORY_WIDTH * (history.len() / HISTORY_WIDTH),
            got: history.len(),
        });
    }
    Ok(Observation {
        prop: sensors.prop(),
        history: history.to_vec(),
        target: z_target.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: RobotState,
    pub fallen: bool,
    /// Non-finite action or state; the episode must end.
    pub fault: bool,
}

pub struct QuadrupedEnv {
    config: SimConfig,
    terrain: Arc<HeightField>,
    dr: DomainRandomization,
    mass: f64,
    inertia: Vector3<f64>,
    /// Center of mass in the base frame.
    com_offset: Vector3<f64>,
    com_pos: Vector3<f64>,
    com_vel: Vector3<f64>,
    rot: UnitQuaternion<f64>,
    omega_body: Vector3<f64>,
    q: [f64; NUM_JOINTS],
    q_dot: [f64; NUM_JOINTS],
    anchors: [Option<Vector3<f64>>; NUM_LEGS],
    contacts: [bool; NUM_LEGS],
    physics_steps: u64,
    delay_line: VecDeque<Sensors>,
    latency_steps: usize,
    history: VecDeque<[f64; HISTORY_WIDTH]>,
    prev_action: [f64; NUM_JOINTS],
}

impl QuadrupedEnv {
    pub fn new(config: SimConfig, terrain: Arc<HeightField>) -> Self {
        let mut env = QuadrupedEnv {
            terrain,
            dr: DomainRandomization::nominal(),
            mass: config.base_mass,
            inertia: Vector3::from(config.base_inertia),
            com_offset: Vector3::zeros(),
            com_pos: Vector3::zeros(),
            com_vel: Vector3::zeros(),
            rot: UnitQuaternion::identity(),
            omega_body: Vector3::zeros(),
            q: config.morphology.default_pose(),
            q_dot: [0.0; NUM_JOINTS],
            anchors: [None; NUM_LEGS],
            contacts: [false; NUM_LEGS],
            physics_steps: 0,
            delay_line: VecDeque::new(),
            latency_steps: 0,
            history: VecDeque::new(),
            prev_action: [0.0; NUM_JOINTS],
            config,
        };
        env.reset_history();
        env
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn terrain(&self) -> &Arc<HeightField> {
        &self.terrain
    }

    pub fn set_terrain(&mut self, terrain: Arc<HeightField>) {
        self.terrain = terrain;
    }

    pub fn randomization(&self) -> &DomainRandomization {
        &self.dr
    }

    pub fn physics_steps(&self) -> u64 {
        self.physics_steps
    }

    pub fn latency_steps(&self) -> usize {
        self.latency_steps
    }

    /// Standing frame with every foot on flat ground at the origin.
    pub fn standing_frame(morph: &Morphology) -> MotionFrame {
        let q = morph.default_pose();
        let foot = morph.foot_in_base(Leg::FrontLeft, &q[..3]);
        MotionFrame {
            p: [0.0, 0.0, -foot.z],
            theta: [1.0, 0.0, 0.0, 0.0],
            v: [0.0; 6],
            q: q.to_vec(),
            q_dot: vec![0.0; NUM_JOINTS],
        }
    }

    fn base_position(&self) -> Vector3<f64> {
        self.com_pos - self.rot * self.com_offset
    }

    fn omega_world(&self) -> Vector3<f64> {
        self.rot * self.omega_body
    }

    fn substep_dt(&self) -> f64 {
        1.0 / (self.config.physics_frequency() * self.config.contact_substeps.max(1) as f64)
    }

    /// Mean base velocity over the last sub-step. Gravity is integrated
    /// exactly, so the end-of-step velocity lags the position update by half
    /// a sub-step of gravity.
    fn base_velocity(&self) -> Vector3<f64> {
        let lag = Vector3::new(0.0, 0.0, 0.5 * self.config.gravity * self.substep_dt());
        self.com_vel + lag + self.omega_world().cross(&(self.base_position() - self.com_pos))
    }

    /// Places the robot in `frame`'s pose with its base above `spawn` (x, y).
    /// The frame's base height is taken relative to the local terrain, and the
    /// body is raised further if any foot would start below the surface.
    pub fn reset(&mut self, frame: &MotionFrame, spawn: [f64; 2], dr: DomainRandomization) -> Result<RobotState> {
        frame.validate()?;
        if frame.joint_count() != NUM_JOINTS {
            return Err(Error::Shape {
                context: "reset frame joints",
                expected: NUM_JOINTS,
                got: frame.joint_count(),
            });
        }
        if frame.p[2] <= 0.0 {
            return Err(Error::InitialPenetration { depth: -frame.p[2] });
        }
        self.dr = dr;
        self.mass = self.config.base_mass + dr.added_mass;
        self.com_offset = Vector3::new(dr.com_displacement, 0.0, 0.0);
        self.rot = frame.orientation();
        let morph = self.config.morphology;
        for (j, (q, qd)) in frame.q.iter().zip(&frame.q_dot).enumerate() {
            self.q[j] = morph.clamp_joint(j, *q);
            self.q_dot[j] = *qd;
        }
        let ground = self.terrain.sample_height(spawn[0], spawn[1]);
        let mut base = Vector3::new(spawn[0], spawn[1], frame.p[2] + ground);
        let mut lift: f64 = 0.0;
        for leg in Leg::ALL {
            let foot = base + self.rot * morph.foot_in_base(leg, &self.q[3 * leg.index()..3 * leg.index() + 3]);
            lift = lift.max(self.terrain.sample_height(foot.x, foot.y) - foot.z);
        }
        if lift > MAX_RESET_LIFT {
            return Err(Error::InitialPenetration { depth: lift });
        }
        base.z += lift;
        let omega = Vector3::new(frame.v[3], frame.v[4], frame.v[5]);
        let lin = Vector3::new(frame.v[0], frame.v[1], frame.v[2]);
        let r_com = self.rot * self.com_offset;
        self.com_pos = base + r_com;
        let lag = Vector3::new(0.0, 0.0, 0.5 * self.config.gravity * self.substep_dt());
        self.com_vel = lin + omega.cross(&r_com) - lag;
        self.omega_body = self.rot.inverse_transform_vector(&omega);
        self.anchors = [None; NUM_LEGS];
        self.physics_steps = 0;
        for leg in Leg::ALL {
            let foot = self.foot_position(leg);
            self.contacts[leg.index()] = self.terrain.sample_height(foot.x, foot.y) - foot.z >= -1e-6;
        }
        self.latency_steps = self.config.latency_steps(dr.latency);
        let now = self.live_sensors();
        self.delay_line = std::iter::repeat_n(now, self.latency_steps).collect();
        self.reset_history();
        Ok(self.state())
    }

    fn reset_history(&mut self) {
        self.history = std::iter::repeat_n([0.0; HISTORY_WIDTH], self.config.history_len).collect();
        self.prev_action = [0.0; NUM_JOINTS];
    }

    fn foot_position(&self, leg: Leg) -> Vector3<f64> {
        let i = 3 * leg.index();
        self.base_position() + self.rot * self.config.morphology.foot_in_base(leg, &self.q[i..i + 3])
    }

    pub fn state(&self) -> RobotState {
        let p = self.base_position();
        let v = self.base_velocity();
        let w = self.omega_world();
        let quat = self.rot.quaternion();
        RobotState {
            position: [p.x, p.y, p.z],
            orientation: [quat.w, quat.i, quat.j, quat.k],
            linear_velocity: [v.x, v.y, v.z],
            angular_velocity: [w.x, w.y, w.z],
            q: self.q,
            q_dot: self.q_dot,
            contacts: self.contacts,
            time: self.physics_steps as f64 / self.config.physics_frequency(),
        }
    }

    fn live_sensors(&self) -> Sensors {
        let v = self.rot.inverse_transform_vector(&self.base_velocity());
        let g = self.rot.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0));
        Sensors {
            linear_velocity: [v.x, v.y, v.z],
            angular_velocity: [self.omega_body.x, self.omega_body.y, self.omega_body.z],
            projected_gravity: [g.x, g.y, g.z],
            q: self.q,
            q_dot: self.q_dot,
        }
    }

    /// Sensor reading delayed by the latency: the state as it was
    /// `latency_steps` physics steps ago.
    pub fn sensors(&self) -> Sensors {
        self.delay_line.front().copied().unwrap_or_else(|| self.live_sensors())
    }

    /// Flattened history, newest entry first.
    pub fn history(&self) -> Vec<f64> {
        self.history.iter().flat_map(|h| h.iter().copied()).collect()
    }

    pub fn observation(&self, z_target: &[f64]) -> Result<Observation> {
        assemble_observation(&self.sensors(), &self.history(), z_target, z_target.len())
    }

    /// Instantaneous change of the base velocity (world frame), for probing.
    pub fn apply_velocity_impulse(&mut self, dv: [f64; 3]) {
        self.com_vel += Vector3::from(dv);
    }

    /// Total mechanical energy: base kinetic and potential plus joint kinetic.
    pub fn mechanical_energy(&self) -> f64 {
        let i = self.inertia;
        let w = self.omega_body;
        let rot = 0.5 * (i.x * w.x * w.x + i.y * w.y * w.y + i.z * w.z * w.z);
        let joints: f64 = self.q_dot.iter().map(|qd| 0.5 * self.config.joint_inertia * qd * qd).sum();
        0.5 * self.mass * self.com_vel.norm_squared() + rot + self.mass * self.config.gravity * self.com_pos.z + joints
    }

    /// Advances one control step toward absolute joint targets `action`.
    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        if action.len() != NUM_JOINTS || action.iter().any(|a| !a.is_finite()) {
            return StepOutcome {
                state: self.state(),
                fallen: false,
                fault: true,
            };
        }
        let mut targets = [0.0; NUM_JOINTS];
        targets.copy_from_slice(action);
        for _ in 0..self.config.physics_substeps {
            self.physics_step(Some(&targets));
        }
        let state = self.state();
        let finite = state.position.iter().chain(&state.linear_velocity).chain(&state.q_dot).all(|x| x.is_finite());
        let default = self.config.morphology.default_pose();
        for j in 0..NUM_JOINTS {
            self.prev_action[j] = targets[j] - default[j];
        }
        let s = self.sensors();
        let mut entry = [0.0; HISTORY_WIDTH];
        entry[..3].copy_from_slice(&s.projected_gravity);
        entry[3..6].copy_from_slice(&s.angular_velocity);
        entry[6..18].copy_from_slice(&self.prev_action);
        entry[18..30].copy_from_slice(&s.q);
        entry[30..42].copy_from_slice(&s.q_dot);
        if self.config.history_len > 0 {
            self.history.pop_back();
            self.history.push_front(entry);
        }
        let ground = self.terrain.sample_height(state.position[0], state.position[1]);
        StepOutcome {
            fallen: state.position[2] < ground + self.config.fall_height,
            fault: !finite,
            state,
        }
    }

    /// One physics step. `None` turns the motors off.
    pub fn physics_step(&mut self, targets: Option<&[f64; NUM_JOINTS]>) {
        if self.latency_steps > 0 {
            let now = self.live_sensors();
            self.delay_line.push_back(now);
            while self.delay_line.len() > self.latency_steps {
                self.delay_line.pop_front();
            }
        }
        let dt = self.substep_dt();
        for _ in 0..self.config.contact_substeps.max(1) {
            self.integrate(dt, targets);
        }
        self.physics_steps += 1;
    }

    fn integrate(&mut self, dt: f64, targets: Option<&[f64; NUM_JOINTS]>) {
        let c = &self.config;
        let mut torque = [0.0; NUM_JOINTS];
        if let Some(t) = targets {
            let (kp, kd) = (c.kp * self.dr.kp_factor, c.kd * self.dr.kd_factor);
            for j in 0..NUM_JOINTS {
                torque[j] = pd_torque(kp, kd, self.dr.motor_strength, t[j], self.q[j], self.q_dot[j], c.torque_limit);
            }
        }
        let morph = c.morphology;
        let base = self.base_position();
        let omega = self.omega_world();
        let mut force = Vector3::zeros();
        let mut moment = Vector3::zeros();
        let mut load = [0.0; NUM_JOINTS];
        for leg in Leg::ALL {
            let l = leg.index();
            let qs = &self.q[3 * l..3 * l + 3];
            let foot = base + self.rot * morph.foot_in_base(leg, qs);
            let (h, hx, hy) = self.terrain.height_and_gradient(foot.x, foot.y);
            let normal = Vector3::new(-hx, -hy, 1.0).normalize();
            let depth = (h - foot.z) * normal.z;
            if depth <= 0.0 {
                self.anchors[l] = None;
                self.contacts[l] = false;
                continue;
            }
            self.contacts[l] = true;
            let jac = morph.foot_jacobian(leg, qs);
            let qd = Vector3::new(self.q_dot[3 * l], self.q_dot[3 * l + 1], self.q_dot[3 * l + 2]);
            let foot_vel = self.com_vel + omega.cross(&(foot - self.com_pos)) + self.rot * (jac * qd);
            let vn = foot_vel.dot(&normal);
            let fn_mag = (c.contact_stiffness * depth - c.contact_damping * vn).max(0.0);
            let anchor = *self.anchors[l].get_or_insert(foot);
            let disp = foot - anchor;
            let disp_t = disp - normal * disp.dot(&normal);
            let vel_t = foot_vel - normal * vn;
            let mut ft = -c.tangential_stiffness * disp_t - c.tangential_damping * vel_t;
            let limit = self.dr.friction * fn_mag;
            let ft_norm = ft.norm();
            if ft_norm > limit {
                ft *= limit / ft_norm;
                // slide the anchor so the spring carries the capped force
                self.anchors[l] = Some(foot + (ft + c.tangential_damping * vel_t) / c.tangential_stiffness);
            }
            let f = normal * fn_mag + ft;
            force += f;
            moment += (foot - self.com_pos).cross(&f);
            let gen = jac.transpose() * self.rot.inverse_transform_vector(&f);
            for k in 0..3 {
                load[3 * l + k] = gen[k];
            }
        }

        let g = c.gravity;
        self.com_vel += dt * (force / self.mass - Vector3::new(0.0, 0.0, g));
        self.com_pos += dt * self.com_vel + Vector3::new(0.0, 0.0, 0.5 * g * dt * dt);

        let inertia = Matrix3::from_diagonal(&self.inertia);
        let tau = self.rot.inverse_transform_vector(&moment);
        let w = self.omega_body;
        let gyro = w.cross(&(inertia * w));
        self.omega_body += dt * (tau - gyro).component_div(&self.inertia);
        self.rot *= UnitQuaternion::from_scaled_axis(self.omega_body * dt);

        for j in 0..NUM_JOINTS {
            let friction = -c.joint_damping * self.q_dot[j];
            self.q_dot[j] += dt * (torque[j] + load[j] + friction) / c.joint_inertia;
            self.q[j] += dt * self.q_dot[j];
            let (lo, hi) = (morph.joint_lower[j % 3], morph.joint_upper[j % 3]);
            if self.q[j] < lo {
                self.q[j] = lo;
                self.q_dot[j] = self.q_dot[j].max(0.0);
            } else if self.q[j] > hi {
                self.q[j] = hi;
                self.q_dot[j] = self.q_dot[j].min(0.0);
            }
        }
    }
}
