//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr. The training-based checks share one pipeline run: prior, style
//! policy, then three terrain-adaptation variants from the same style policy.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use latentmimic::config::{RunConfig, Stage, TerrainRange};
use latentmimic::eval::{Evaluator, ImitationStats};
use latentmimic::motion::NUM_JOINTS;
use latentmimic::prior::{gaussian_kl, verify_decomposition, LatentGaussian, LatentPrior};
use latentmimic::rewards::ToleranceSchedule;
use latentmimic::sim::{build_terrain, noise_bound, stair_rise, TerrainKind, NOISE_NODES};
use latentmimic::trainer::{
    admit_count, curriculum_update, next_level, policy_divergence, run_stage, ActorCritic, CurriculumState,
    EpisodeResult, PolicyCheckpoint, Reference, RewardMode, RolloutCollector, StepContext, PRIOR_CHECKPOINT,
    STYLE_CHECKPOINT,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;
const EVAL_SEED: u64 = 4242;
/// Terrain-adaptation iterations per variant.
const ADAPTATION_ITERATIONS: usize = 150;
const TRIALS: usize = 16;

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("acceptance criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

#[test]
fn criterion_1_decomposition() {
    let (worst, secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = (0.0f64, true);
        for _ in 0..100 {
            let p_ref = common::random_simplex(6, &mut rng);
            let p_pi = common::random_simplex(6, &mut rng);
            let channel: Vec<Vec<f64>> = (0..6).map(|_| common::random_simplex(3, &mut rng)).collect();
            let d = verify_decomposition(&p_ref, &p_pi, &channel).unwrap();
            // the channel is shared, so the joint divergence equals the divergence on X
            let total = common::discrete_kl(&p_ref, &p_pi);
            let marg = |p: &[f64]| -> Vec<f64> { (0..3).map(|z| (0..6).map(|x| p[x] * channel[x][z]).sum()).collect() };
            let marginal = common::discrete_kl(&marg(&p_ref), &marg(&p_pi));
            let err = (d.total - total)
                .abs()
                .max((d.marginal - marginal).abs())
                .max((d.total - d.marginal - d.conditional).abs());
            worst.0 = worst.0.max(err);
            worst.1 &= d.marginal <= d.total;
        }
        worst
    });
    let pass = worst.0 < 1e-12 && worst.1 && secs < 1.0;
    report(1, pass, &format!("max error {:.2e}, marginal <= total: {}, {secs:.3} s", worst.0, worst.1));
    assert!(pass);
}

#[test]
fn criterion_2_gaussian_kl_monte_carlo() {
    let (worst, secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let d = rng.random_range(1..=8);
            let mut g = || {
                let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let std = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
                LatentGaussian::new(mean, std).unwrap()
            };
            let (a, b) = (g(), g());
            let mc = common::monte_carlo_kl(&a, &b, 1_000_000, &mut rng);
            worst = worst.max((gaussian_kl(&a, &b).unwrap() - mc).abs());
        }
        worst
    });
    let pass = worst < 1e-2 && secs < 10.0;
    report(2, pass, &format!("max |closed form - MC| {worst:.2e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn criterion_3_gradient_fidelity() {
    let (worst, secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..100).map(|_| common::gradient_check(&mut rng)).fold(0.0, f64::max)
    });
    let pass = worst < 1e-4 && secs < 30.0;
    report(3, pass, &format!("max relative error {worst:.2e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn criterion_4_terrain_goldens() {
    let ((rise1, rise64, runs, wave, noise_dim, noise_max), secs) = timed(|| {
        let row = |kind, level| -> (Vec<f64>, f64) {
            let t = build_terrain(kind, level, 5).unwrap();
            (t.heights().column(0).to_vec(), t.resolution())
        };
        let edges = |h: &[f64]| -> Vec<(usize, f64)> {
            h.windows(2).enumerate().filter(|(_, w)| (w[1] - w[0]).abs() > 1e-9).map(|(i, w)| (i + 1, w[1] - w[0])).collect()
        };
        let (h1, _) = row(TerrainKind::Stairs, 1);
        let (h64, res) = row(TerrainKind::Stairs, 64);
        let steps1: Vec<f64> = edges(&h1).iter().map(|e| e.1).collect();
        let steps64: Vec<f64> = edges(&h64).iter().map(|e| e.1).collect();
        let e = edges(&h64);
        let runs: Vec<f64> = e.windows(2).map(|w| (w[1].0 - w[0].0) as f64 * res).collect();
        let waves = build_terrain(TerrainKind::Waves, 64, 5).unwrap();
        let hw = waves.heights();
        let p2v = hw.iter().cloned().fold(f64::MIN, f64::max) - hw.iter().cloned().fold(f64::MAX, f64::min);
        let noise = build_terrain(TerrainKind::Noise, 64, 5).unwrap();
        let nmax = noise.heights().iter().map(|h| h.abs()).fold(0.0, f64::max);
        (steps1, steps64, runs, p2v, noise.heights().dim(), nmax)
    });
    let all_near = |v: &[f64], target: f64| !v.is_empty() && v.iter().all(|x| (x - target).abs() < 1e-12);
    let checks = [
        all_near(&rise1, 0.05) && (stair_rise(1) - 0.05).abs() < 1e-12,
        all_near(&rise64, 0.23) && (stair_rise(64) - 0.23).abs() < 1e-12,
        all_near(&runs, 0.3),
        (wave - 0.4).abs() < 1e-12,
        noise_dim == (80, 80) && NOISE_NODES == 80,
        noise_max <= 0.1 + 1e-12 && (noise_bound(64) - 0.1).abs() < 1e-12,
    ];
    let pass = checks.iter().all(|c| *c) && secs < 1.0;
    report(
        4,
        pass,
        &format!(
            "rise 1/64 ok: {}/{}, run ok: {}, wave p2v {wave:.15}, noise grid {noise_dim:?} max |h| {noise_max:.6}, {secs:.3} s",
            checks[0], checks[1], checks[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_curriculum_and_buffer_mechanics() {
    let (ok, secs) = timed(|| {
        let schedule = ToleranceSchedule::default();
        let mut monotone = (schedule.current_threshold(0) - 0.5).abs() < 1e-15;
        let mut prev = 0.0;
        for it in 0..=2 * schedule.ramp {
            let t = schedule.current_threshold(it);
            monotone &= t >= prev;
            prev = t;
        }
        monotone &= (schedule.current_threshold(schedule.ramp) - std::f64::consts::TAU).abs() < 1e-12;
        monotone &= (schedule.current_threshold(10 * schedule.ramp) - std::f64::consts::TAU).abs() < 1e-12;

        let admits = (1..=1000usize).all(|b| admit_count(b) == (b + 9) / 10);

        // levels move only on traversal, capped at 64
        let mut levels_ok = true;
        for level in 1..=64u32 {
            levels_ok &= next_level(TerrainKind::Stairs, level, false) == level;
            levels_ok &= next_level(TerrainKind::Stairs, level, true) == (level + 1).min(64);
        }
        let mut state = CurriculumState::new(vec![TerrainKind::Stairs; 4]);
        let results = [
            EpisodeResult { env: 0, level: 1, traversed: true },
            EpisodeResult { env: 1, level: 1, traversed: false },
        ];
        curriculum_update(&mut state, &results).unwrap();
        levels_ok &= state.levels == vec![2, 1, 1, 1] && state.iteration == 1;
        monotone && admits && levels_ok
    });
    let pass = ok && secs < 5.0;
    report(5, pass, &format!("{secs:.3} s"));
    assert!(pass);
}

/// Artifacts of one acceptance pipeline run.
struct Pipeline {
    _dir: tempfile::TempDir,
    config: RunConfig,
    prior: LatentPrior,
    style: PolicyCheckpoint,
    random: ActorCritic,
    style_secs: f64,
    /// (buffer on, anchor 0.1), (buffer off, anchor 0.1), (buffer on, anchor 0).
    adapted: [PolicyCheckpoint; 3],
    adaptation_secs: f64,
}

fn copy_into(dir: &Path, from: &Path, names: &[&str]) {
    std::fs::create_dir_all(dir).unwrap();
    for n in names {
        std::fs::copy(from.join(n), dir.join(n)).unwrap();
    }
}

fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root: PathBuf = dir.path().join("style");
        let config = RunConfig {
            seed: SEED,
            out_dir: root.clone(),
            ..RunConfig::default()
        };
        run_stage(&config, Stage::Prior).unwrap();
        let prior = LatentPrior::load(&root.join(PRIOR_CHECKPOINT)).unwrap();
        let (style, style_secs) = timed(|| run_stage(&config, Stage::Imitation).unwrap());
        let style = PolicyCheckpoint::load(&style.checkpoint).unwrap();

        // the policy stage draws its initial policy first from the seeded stream
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let t = &config.trainer;
        let obs_dim = config.env.observation_dim(prior.latent_dim());
        let random = ActorCritic::new(obs_dim, NUM_JOINTS, &t.actor_hidden, &t.critic_hidden, t.initial_std, &mut rng).unwrap();

        let variants = [(true, 0.1), (false, 0.1), (true, 0.0)];
        let (adapted, adaptation_secs) = timed(|| {
            variants.map(|(buffer, anchor)| {
                let out = dir.path().join(format!("adapt_buffer{buffer}_anchor{anchor}"));
                copy_into(&out, &root, &[PRIOR_CHECKPOINT, STYLE_CHECKPOINT]);
                let mut c = RunConfig {
                    out_dir: out,
                    terrains: vec![TerrainRange::full(TerrainKind::Stairs)],
                    ..config.clone()
                };
                c.trainer.adaptation_iterations = ADAPTATION_ITERATIONS;
                c.trainer.adaptation_buffer = buffer;
                c.rewards.weights.anchor = anchor;
                let o = run_stage(&c, Stage::Adaptation).unwrap();
                PolicyCheckpoint::load(&o.checkpoint).unwrap()
            })
        });
        Pipeline {
            _dir: dir,
            config,
            prior,
            style,
            random,
            style_secs,
            adapted,
            adaptation_secs,
        }
    })
}

fn reference(config: &RunConfig) -> Reference {
    let datasets = config.load_datasets().unwrap();
    Reference::new(Arc::new(config.reference_dataset(&datasets).unwrap().clone())).unwrap()
}

fn evaluator<'a>(p: &'a Pipeline, ckpt: &'a PolicyCheckpoint) -> Evaluator<'a> {
    Evaluator::for_checkpoint(ckpt, p.config.env.clone(), reference(&p.config), p.config.trainer.rollout.clone(), EVAL_SEED)
}

/// Imitation statistics under the iteration-0 tolerance, acting with the
/// policy mean. Both policies are measured with the trained checkpoint's prior.
fn imitation(p: &Pipeline, policy: &ActorCritic, deterministic: bool) -> ImitationStats {
    let ev = Evaluator {
        policy,
        ..evaluator(p, &p.style)
    };
    let tolerance = p.config.rewards.tolerance.current_threshold(0);
    ev.imitation_stats(p.config.trainer.rollout.horizon, tolerance, deterministic).unwrap()
}

#[test]
fn criterion_6_style_learning_signal() {
    let p = pipeline();
    let trained = imitation(p, &p.style.policy, true);
    let random = imitation(p, &p.random, true);
    let sampled = (imitation(p, &p.style.policy, false), imitation(p, &p.random, false));
    let mimic_ok = trained.mean_mimic >= 2.0 * random.mean_mimic;
    let length_ok = trained.mean_episode_length >= 3.0 * random.mean_episode_length;
    let pass = mimic_ok && length_ok && p.style_secs <= 7200.0;
    report(
        6,
        pass,
        &format!(
            "mimic {:.4} vs random {:.4}, length {:.2} vs random {:.2}; sampled actions: mimic {:.4} vs {:.4}, length {:.2} vs {:.2}; {:.0} s",
            trained.mean_mimic,
            random.mean_mimic,
            trained.mean_episode_length,
            random.mean_episode_length,
            sampled.0.mean_mimic,
            sampled.1.mean_mimic,
            sampled.0.mean_episode_length,
            sampled.1.mean_episode_length,
            p.style_secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_flat_traversal() {
    let p = pipeline();
    let (rate, secs) = timed(|| evaluator(p, &p.style).success_rate(TerrainKind::Flat, 1, TRIALS).unwrap());
    let pass = rate.successes == TRIALS && secs < 300.0;
    report(7, pass, &format!("{}/{} flat trials traversed, {secs:.1} s", rate.successes, rate.trials));
    assert!(pass);
}

fn stairs_max_level(p: &Pipeline, ckpt: &PolicyCheckpoint) -> (u32, f64) {
    let levels: Vec<u32> = (1..=64).collect();
    let table = evaluator(p, ckpt).success_table(TerrainKind::Stairs, &levels, TRIALS).unwrap();
    let level2 = table.levels[1].rate;
    (table.max_level_at(50.0).unwrap_or(0), level2)
}

#[test]
fn criterion_8_adaptation_buffer_ablation() {
    let p = pipeline();
    let (with_buffer, with_level2) = stairs_max_level(p, &p.adapted[0]);
    let (without_buffer, _) = stairs_max_level(p, &p.adapted[1]);
    let style_level2 = evaluator(p, &p.style).success_rate(TerrainKind::Stairs, 2, TRIALS).unwrap().rate;
    let pass = with_buffer > without_buffer && with_level2 > style_level2 && p.adaptation_secs <= 6.0 * 3600.0;
    report(
        8,
        pass,
        &format!(
            "stairs max level at >=50%: buffer {with_buffer} vs no buffer {without_buffer}; level-2 success adapted {with_level2:.3} vs style {style_level2:.3}; {:.0} s",
            p.adaptation_secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_latent_separation() {
    let p = pipeline();
    let (result, secs) = timed(|| {
        let datasets = p.config.load_datasets().unwrap();
        let latents: Vec<Vec<Vec<f64>>> = datasets
            .iter()
            .map(|d| {
                d.windows(p.prior.history())
                    .iter()
                    .map(|w| p.prior.encode(w).unwrap().mean().to_vec())
                    .collect()
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pick = |s: usize| rng.random_range(0..latents[s].len());
        let (mut intra, mut inter) = (0.0, 0.0);
        for k in 0..100 {
            let s = k % 2;
            intra += dist(&latents[s][pick(s)], &latents[s][pick(s)]);
            inter += dist(&latents[0][pick(0)], &latents[1][pick(1)]);
        }
        (intra / 100.0, inter / 100.0)
    });
    let pass = result.0 < result.1 && secs < 300.0;
    report(9, pass, &format!("mean intra-style distance {:.4}, inter-style {:.4}", result.0, result.1));
    assert!(pass);
}

/// Raw observations visited by the style policy on flat ground.
fn probe_observations(p: &Pipeline, count: usize) -> Array2<f64> {
    let rollout = p.config.trainer.rollout.clone();
    let envs = rollout.num_envs;
    let mut collector = RolloutCollector::new(
        rollout,
        p.config.env.clone(),
        reference(&p.config),
        None,
        &p.style.prior,
        EVAL_SEED,
    )
    .unwrap();
    let ctx = StepContext {
        policy: &p.style.policy,
        prior: &p.style.prior,
        anchor: None,
        weights: &p.config.rewards.weights,
        tolerance: std::f64::consts::TAU,
        mode: RewardMode::MimicOnly,
        gamma: 0.99,
        deterministic: false,
    };
    let batch = collector.collect(&ctx, count.div_ceil(envs)).unwrap();
    let rows = batch.raw_observations();
    rows.slice(ndarray::s![..count, ..]).to_owned()
}

#[test]
fn criterion_10_anchor_effect() {
    let p = pipeline();
    let probe = probe_observations(p, 1000);
    let anchored = policy_divergence(&p.adapted[0].policy, &p.style.policy, &probe).unwrap();
    let free = policy_divergence(&p.adapted[2].policy, &p.style.policy, &probe).unwrap();
    let pass = anchored < free;
    report(
        10,
        pass,
        &format!("KL to style policy over {} probe observations: anchor 0.1 {anchored:.4}, anchor 0 {free:.4}", probe.nrows()),
    );
    assert!(pass);
}
