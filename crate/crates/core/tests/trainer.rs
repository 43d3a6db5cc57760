use std::sync::Arc;

use latentmimic::config::{RunConfig, Stage};
use latentmimic::motion::{GaitStyle, MotionDataset, NUM_JOINTS};
use latentmimic::prior::{LatentPrior, PriorConfig};
use latentmimic::rewards::RewardWeights;
use latentmimic::sim::{SimConfig, TerrainKind};
use latentmimic::trainer::{
    adaptation_insert, finetune_predictor, run_stage, ActorCritic, AdaptationBuffer, AdaptationEntry, Reference,
    RewardMode, RolloutBatch, RolloutCollector, RolloutConfig, StepContext, Transition,
};
use latentmimic::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_prior(datasets: &[MotionDataset], seed: u64) -> LatentPrior {
    let config = PriorConfig {
        hidden: vec![32],
        ..PriorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentPrior::for_datasets(config, datasets, &mut rng).unwrap()
}

fn trot() -> MotionDataset {
    MotionDataset::generate(GaitStyle::Trot, 6.0, 50.0).unwrap()
}

struct Setup {
    prior: LatentPrior,
    policy: ActorCritic,
    reference: Reference,
    weights: RewardWeights,
}

fn setup() -> Setup {
    let ds = trot();
    let prior = small_prior(std::slice::from_ref(&ds), 1);
    let obs_dim = SimConfig::default().observation_dim(prior.latent_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = ActorCritic::new(obs_dim, NUM_JOINTS, &[32], &[32], 0.5, &mut rng).unwrap();
    Setup {
        prior,
        policy,
        reference: Reference::new(Arc::new(ds)).unwrap(),
        weights: RewardWeights::default(),
    }
}

fn collect(s: &Setup, envs: usize, horizon: usize, seed: u64) -> RolloutBatch {
    let config = RolloutConfig {
        num_envs: envs,
        horizon,
        ..RolloutConfig::default()
    };
    let mut collector =
        RolloutCollector::new(config, SimConfig::default(), s.reference.clone(), None, &s.prior, seed).unwrap();
    let ctx = StepContext {
        policy: &s.policy,
        prior: &s.prior,
        anchor: None,
        weights: &s.weights,
        tolerance: 0.5,
        mode: RewardMode::MimicOnly,
        gamma: 0.99,
        deterministic: false,
    };
    collector.collect(&ctx, horizon).unwrap()
}

fn fingerprint(t: &Transition) -> Vec<u64> {
    let mut v: Vec<u64> = t.action.iter().chain(&t.next_observation).map(|x| x.to_bits()).collect();
    v.push(t.reward.to_bits());
    v.push(t.log_prob.to_bits());
    v.push(u64::from(t.done));
    v
}

#[test]
fn rollout_transition_count_and_flat_bookkeeping() {
    let s = setup();
    let batch = collect(&s, 8, 64, 7);
    assert_eq!(batch.transitions.len(), 512);
    assert_eq!(batch.bootstrap.len(), 8);
    for t in &batch.transitions {
        assert_eq!(t.terrain, TerrainKind::Flat);
        assert_eq!(t.level, 0);
        assert!(t.log_prob.is_finite());
        assert!(t.terms.task.is_none() && t.terms.anchor.is_none());
        assert!(t.terms.mimic > 0.0 && t.terms.mimic <= 1.0);
    }
    // every finished episode ends on a done transition of its environment
    let dones = batch.transitions.iter().filter(|t| t.done).count();
    assert_eq!(dones, batch.episodes.len());
}

#[test]
fn rollouts_are_deterministic() {
    let s = setup();
    let a = collect(&s, 4, 32, 11);
    let b = collect(&s, 4, 32, 11);
    let fa: Vec<_> = a.transitions.iter().map(fingerprint).collect();
    let fb: Vec<_> = b.transitions.iter().map(fingerprint).collect();
    assert_eq!(fa, fb);
    let c = collect(&s, 4, 32, 12);
    let fc: Vec<_> = c.transitions.iter().map(fingerprint).collect();
    assert_ne!(fa, fc);
}

#[test]
fn joint_targets_follow_the_clip_and_wrap() {
    let s = setup();
    let frames = &s.reference.dataset.frames;
    let n = frames.len();
    assert_eq!(s.reference.joint_target(3, 4), frames[7].q.as_slice());
    assert_eq!(s.reference.joint_target(n - 1, 2), frames[1].q.as_slice());
    // the generated clip holds whole gait cycles, so wrapping is seamless
    let step = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let seam = step(&frames[n - 1].q, &frames[0].q);
    let typical = (1..n).map(|i| step(&frames[i - 1].q, &frames[i].q)).fold(0.0, f64::max);
    assert!(seam <= typical + 1e-9, "seam {seam} vs {typical}");
}

#[test]
fn predictor_memorizes_a_single_pair() {
    let s = setup();
    let mut prior = s.prior.clone();
    let batch = collect(&s, 2, 8, 5);
    let t = &batch.transitions[3];
    let mut buffer = AdaptationBuffer::new(4);
    buffer.push(AdaptationEntry {
        window: t.window.clone(),
        next_window: t.next_window.clone(),
        reward: t.reward,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses = finetune_predictor(&mut prior, &buffer, 2000, 1, &mut rng).unwrap();
    assert_eq!(losses.len(), 2000);
    let mse = prior
        .prediction_loss_rows(std::slice::from_ref(&t.window), std::slice::from_ref(&t.next_window))
        .unwrap();
    assert!(mse < 1e-3, "mse {mse}");
    // the encoder is untouched
    assert_eq!(prior.encoder(), s.prior.encoder());
}

#[test]
fn zero_steps_and_empty_buffer_are_no_ops() {
    let s = setup();
    let mut prior = s.prior.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = AdaptationBuffer::new(4);
    assert!(finetune_predictor(&mut prior, &empty, 50, 8, &mut rng).unwrap().is_empty());
    assert_eq!(prior.predictor(), s.prior.predictor());

    let batch = collect(&s, 2, 16, 5);
    let mut buffer = AdaptationBuffer::new(64);
    assert_eq!(adaptation_insert(&mut buffer, &batch.transitions), 4);
    assert!(finetune_predictor(&mut prior, &buffer, 0, 8, &mut rng).unwrap().is_empty());
    assert_eq!(prior.predictor(), s.prior.predictor());
}

#[test]
fn flat_finetuning_does_not_regress_held_out_flat_prediction() {
    let ds = trot();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut prior = small_prior(std::slice::from_ref(&ds), 4);
    prior.pretrain(std::slice::from_ref(&ds), 10, 64, &mut rng).unwrap();
    let obs_dim = SimConfig::default().observation_dim(prior.latent_dim());
    let policy = ActorCritic::new(obs_dim, NUM_JOINTS, &[32], &[32], 0.5, &mut rng).unwrap();
    let s = Setup {
        prior,
        policy,
        reference: Reference::new(Arc::new(ds)).unwrap(),
        weights: RewardWeights::default(),
    };
    let train = collect(&s, 8, 64, 21);
    let held = collect(&s, 8, 64, 22);
    let (cur, next): (Vec<_>, Vec<_>) = held.transitions.iter().map(|t| (t.window.clone(), t.next_window.clone())).unzip();
    let before = s.prior.prediction_loss_rows(&cur, &next).unwrap();

    let mut prior = s.prior.clone();
    let mut buffer = AdaptationBuffer::new(1000);
    adaptation_insert(&mut buffer, &train.transitions);
    finetune_predictor(&mut prior, &buffer, 100, 32, &mut rng).unwrap();
    let after = prior.prediction_loss_rows(&cur, &next).unwrap();
    assert!(after <= 1.1 * before, "held-out MSE {before} -> {after}");
}

fn tiny_run(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig {
        seed: 9,
        clip_seconds: 4.0,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    c.prior.hidden = vec![16];
    c.prior.epochs = 2;
    c.trainer.imitation_iterations = 2;
    c.trainer.adaptation_iterations = 2;
    c.trainer.actor_hidden = vec![16];
    c.trainer.critic_hidden = vec![16];
    c.trainer.encoder_finetune_steps = 2;
    c.trainer.predictor_interval = 1;
    c.trainer.predictor_steps = 2;
    c.trainer.rollout.num_envs = 4;
    c.trainer.rollout.horizon = 16;
    c.trainer.rollout.max_episode_steps = 40;
    c.trainer.ppo.minibatch = 16;
    c
}

#[test]
fn stages_check_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    match run_stage(&cfg, Stage::Imitation) {
        Err(Error::MissingPrerequisite { stage, missing, .. }) => {
            assert_eq!(stage, "imitation");
            assert_eq!(missing, "prior");
        }
        other => panic!("expected prerequisite error, got {other:?}"),
    }
    run_stage(&cfg, Stage::Prior).unwrap();
    match run_stage(&cfg, Stage::Adaptation) {
        Err(e @ Error::MissingPrerequisite { .. }) => assert!(e.to_string().contains("imitation")),
        other => panic!("expected prerequisite error, got {other:?}"),
    }
}

#[test]
fn full_pipeline_is_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let prior = run_stage(&cfg, Stage::Prior).unwrap();
        let style = run_stage(&cfg, Stage::Imitation).unwrap();
        for m in &style.metrics {
            assert!(m.reward_task.is_none() && m.reward_anchor.is_none());
            assert_eq!(m.level_stairs, None);
        }
        let adapted = run_stage(&cfg, Stage::Adaptation).unwrap();
        assert_eq!(adapted.metrics[0].iteration, 2);
        assert!(adapted.metrics.iter().all(|m| m.reward_task.is_some() && m.reward_anchor.is_some()));
        assert!(adapted.metrics.iter().all(|m| m.buffer_size > 0));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
        (prior.checkpoint_hash, style.checkpoint_hash, adapted.checkpoint_hash)
    };
    assert_eq!(run(), run());
}
