use std::sync::Arc;

use latentmimic::motion::{Leg, NUM_JOINTS};
use latentmimic::sim::{
    build_terrain, randomize, stair_rise, DomainRandomization, HeightField, QuadrupedEnv, SimConfig, TerrainKind,
};
use latentmimic::Error;

fn flat_env(config: SimConfig) -> QuadrupedEnv {
    QuadrupedEnv::new(config, Arc::new(HeightField::flat()))
}

#[test]
fn standing_frame_touches_down_within_one_physics_step() {
    let config = SimConfig::default();
    let mut env = flat_env(config.clone());
    let frame = QuadrupedEnv::standing_frame(&config.morphology);
    env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    env.physics_step(Some(&config.morphology.default_pose()));
    assert_eq!(env.state().contacts, [true; 4]);
}

#[test]
fn dropped_robot_settles_within_two_seconds() {
    let config = SimConfig::default();
    let mut env = flat_env(config.clone());
    let mut frame = QuadrupedEnv::standing_frame(&config.morphology);
    frame.p[2] += 0.1;
    env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    let mut heights = Vec::new();
    // motors off: the legs fold onto their limits and hold the base
    for _ in 0..(3 * 200) {
        env.physics_step(None);
        heights.push(env.state().position[2]);
    }
    let after = &heights[400..];
    let (lo, hi) = after.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| (a.min(h), b.max(h)));
    assert!(hi - lo < 1e-3, "base height still moving: {lo}..{hi}");
    assert!(env.state().linear_velocity[2].abs() < 1e-3);
}

#[test]
fn holding_the_default_pose_settles_after_a_drop() {
    let config = SimConfig::default();
    let mut env = flat_env(config.clone());
    let mut frame = QuadrupedEnv::standing_frame(&config.morphology);
    frame.p[2] += 0.1;
    env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    let pose = config.morphology.default_pose();
    let mut heights = Vec::new();
    for _ in 0..150 {
        let out = env.step(&pose);
        assert!(!out.fallen && !out.fault);
        heights.push(out.state.position[2]);
    }
    let after = &heights[100..];
    let (lo, hi) = after.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| (a.min(h), b.max(h)));
    assert!(hi - lo < 5e-3, "base height still moving: {lo}..{hi}");
}

#[test]
fn airborne_energy_is_conserved() {
    let config = SimConfig {
        joint_damping: 0.0,
        ..SimConfig::default()
    };
    let mut env = flat_env(config);
    let mut frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    frame.p[2] = 20.0;
    frame.v = [0.7, -0.3, 2.0, 0.4, -1.1, 0.8];
    env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    let e0 = env.mechanical_energy();
    for _ in 0..200 {
        env.physics_step(None);
        assert!(env.state().contacts.iter().all(|c| !c));
    }
    let drift = ((env.mechanical_energy() - e0) / e0).abs();
    assert!(drift < 0.01, "relative energy drift {drift} over one second");
}

#[test]
fn velocity_impulse_reaches_sensors_after_latency() {
    let config = SimConfig {
        gravity: 0.0,
        ..SimConfig::default()
    };
    let mut env = flat_env(config);
    let mut frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    frame.p[2] = 2.0;
    env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    assert_eq!(env.latency_steps(), 6);
    env.apply_velocity_impulse([1.0, 0.0, 0.0]);
    for k in 1..=10 {
        env.physics_step(None);
        let seen = env.sensors().linear_velocity[0];
        if k < 6 {
            assert_eq!(seen, 0.0, "impulse visible after {k} physics steps");
        } else {
            assert!((seen - 1.0).abs() < 1e-12, "impulse missing after {k} physics steps");
        }
    }
}

#[test]
fn zero_gravity_rest_is_an_equilibrium() {
    let config = SimConfig {
        gravity: 0.0,
        ..SimConfig::default()
    };
    let mut env = flat_env(config);
    let mut frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    frame.p[2] = 1.0;
    let before = env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap();
    let out = env.step(&frame.q);
    assert_eq!(out.state.position, before.position);
    assert_eq!(out.state.orientation, before.orientation);
    assert_eq!(out.state.q, before.q);
    assert_eq!(out.state.q_dot, [0.0; NUM_JOINTS]);
}

#[test]
fn trajectories_are_deterministic() {
    let run = || {
        let terrain = Arc::new(build_terrain(TerrainKind::Noise, 40, 9).unwrap());
        let mut env = QuadrupedEnv::new(SimConfig::default(), terrain);
        let frame = QuadrupedEnv::standing_frame(&env.config().morphology);
        env.reset(&frame, [3.0, 3.0], randomize(11)).unwrap();
        let mut pose = frame.q.clone();
        let mut states = Vec::new();
        for k in 0..100 {
            pose[k % NUM_JOINTS] += 0.05 * ((k as f64) * 0.7).sin();
            states.push(env.step(&pose).state);
        }
        states
    };
    assert_eq!(run(), run());
}

#[test]
fn repeated_resets_match() {
    let mut env = flat_env(SimConfig::default());
    let frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    let a = env.reset(&frame, [2.0, 2.0], randomize(3)).unwrap();
    env.step(&[0.3; NUM_JOINTS]);
    let b = env.reset(&frame, [2.0, 2.0], randomize(3)).unwrap();
    assert_eq!(a, b);
    assert!(env.history().iter().all(|x| *x == 0.0));
}

#[test]
fn reset_on_stairs_follows_local_elevation() {
    let terrain = Arc::new(build_terrain(TerrainKind::Stairs, 64, 0).unwrap());
    let mut env = QuadrupedEnv::new(SimConfig::default(), terrain.clone());
    let frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    let spawn = [4.0, 4.0];
    let ground = terrain.sample_height(spawn[0], spawn[1]);
    assert!(ground > 2.0);
    let state = env.reset(&frame, spawn, DomainRandomization::nominal()).unwrap();
    let offset = state.position[2] - frame.p[2] - ground;
    assert!((0.0..=stair_rise(64) + 1e-9).contains(&offset), "offset {offset}");
    let morph = env.config().morphology;
    let rot = frame.orientation();
    for leg in Leg::ALL {
        let i = 3 * leg.index();
        let foot = nalgebra::Vector3::from(state.position) + rot * morph.foot_in_base(leg, &state.q[i..i + 3]);
        assert!(foot.z >= terrain.sample_height(foot.x, foot.y) - 1e-9);
    }
}

#[test]
fn buried_frame_is_rejected() {
    let mut env = flat_env(SimConfig::default());
    let mut frame = QuadrupedEnv::standing_frame(&env.config().morphology);
    frame.p[2] = -0.05;
    let err = env.reset(&frame, [4.0, 4.0], DomainRandomization::nominal()).unwrap_err();
    assert!(matches!(err, Error::InitialPenetration { .. }));
}
