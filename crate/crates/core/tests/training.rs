use faultarm::episode::Episode;
use faultarm::expert::{collect_episodes, default_jobs, run_expert_episode};
use faultarm::norm::compute_norm_stats;
use faultarm::policy::{Checkpoint, PolicyConfig, PolicyMode};
use faultarm::sim::default_scene;
use faultarm::train::{accumulate, chunk_target, init_policy, make_batches, sample_at, train, TrainConfig};
use faultarm::{DegradationConfig, Error, Sim};
use rand::{Rng, SeedableRng};

fn sim() -> Sim {
    Sim::new(default_scene()).unwrap()
}

fn dataset(sim: &Sim) -> Vec<Episode> {
    let jobs = default_jobs(4, &[0.5], 2, 6);
    collect_episodes(sim, &[0, 1, 2, 3], &jobs, 3).unwrap().0
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        warmup_steps: 5,
        decay_step: steps.max(6),
        checkpoint_every: 0,
        ..Default::default()
    }
}

fn config(sim: &Sim) -> PolicyConfig {
    PolicyConfig::desk(sim.scene().observation_dim(), sim.joints())
}

#[test]
fn chunk_targets_repeat_the_last_action() {
    let sim = sim();
    let mut ep = run_expert_episode(&sim, 0, 1, &DegradationConfig::healthy(), None).unwrap();
    ep.steps.truncate(10);
    for (i, s) in ep.steps.iter_mut().enumerate() {
        s.action.d_grip = i as f64 / 10.0;
    }
    let stats = compute_norm_stats(&[ep.clone()], 0.0, 1.0).unwrap();
    let target = chunk_target(&ep, 8, 8, &stats);
    let grips: Vec<f64> = target.chunks(4).map(|a| stats.denormalize(a)[3]).collect();
    let expect = [0.8, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
    for (g, e) in grips.iter().zip(expect) {
        assert!((g - e).abs() < 1e-12, "{grips:?}");
    }
}

#[test]
fn batches_are_seeded_and_bounded() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let a: Vec<_> = make_batches(&eps, &stats, 8, 8, 5).unwrap().take(20).collect();
    let b: Vec<_> = make_batches(&eps, &stats, 8, 8, 5).unwrap().take(20).collect();
    let c: Vec<_> = make_batches(&eps, &stats, 8, 8, 6).unwrap().take(20).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for s in a.iter().flatten() {
        assert_eq!(s.target.len(), 32);
        assert!(s.target.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(matches!(make_batches(&[], &stats, 8, 8, 0), Err(Error::InsufficientData(_))));
}

#[test]
fn accumulation_matches_one_large_batch() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let mut policy = init_policy(PolicyMode::Health, config(&sim), &eps, 2, None).unwrap();
    // nonzero head and projector so every tensor gets gradient
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let flat: Vec<f64> = policy.flat_params().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
    policy.set_flat_params(&flat);
    let samples: Vec<_> = make_batches(&eps, &stats, 8, 8, 1).unwrap().next().unwrap();
    let mut big = policy.zeros_like();
    let mut split = policy.zeros_like();
    accumulate(&policy, &samples, 1.0 / 8.0, &mut big);
    accumulate(&policy, &samples[..4], 1.0 / 8.0, &mut split);
    accumulate(&policy, &samples[4..], 1.0 / 8.0, &mut split);
    for (x, y) in big.flat_params().iter().zip(split.flat_params()) {
        assert!((x - y).abs() <= 1e-10);
    }

    // full training: batch 4 x 2 against batch 8 x 1
    let a = TrainConfig { batch: 4, accumulation: 2, ..quick(20) };
    let b = TrainConfig { batch: 8, accumulation: 1, ..quick(20) };
    let pa = train(policy.clone(), PolicyMode::Health, &eps, &stats, &a, 9, None).unwrap().policy;
    let pb = train(policy, PolicyMode::Health, &eps, &stats, &b, 9, None).unwrap().policy;
    for (x, y) in pa.flat_params().iter().zip(pb.flat_params()) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let cfg = TrainConfig { checkpoint_every: 10, ..quick(25) };
    let dir = tempfile::tempdir().unwrap();
    let run = |seed, out: Option<&std::path::Path>| {
        let p = init_policy(PolicyMode::Health, config(&sim), &eps, 1, None).unwrap();
        let out = train(p, PolicyMode::Health, &eps, &stats, &cfg, seed, out).unwrap();
        Checkpoint::from_policy(&out.policy, PolicyMode::Health, cfg.steps).sha256
    };
    let first = run(3, Some(dir.path()));
    assert_eq!(first, run(3, None));
    assert_ne!(first, run(4, None));
    for f in ["ckpt_10.json", "ckpt_20.json", "final.json", "metrics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let saved = Checkpoint::load(&dir.path().join("final.json")).unwrap();
    assert_eq!(saved.sha256, first);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,lr,loss"));
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn first_loss_is_mean_absolute_target() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for ep in &eps {
        for t in 0..ep.steps.len() {
            let s = sample_at(ep, t, 8, &stats);
            sum += s.target.iter().map(|v| v.abs()).sum::<f64>();
            n += s.target.len();
        }
    }
    let expect = sum / n as f64;
    let p = init_policy(PolicyMode::Baseline, config(&sim), &eps, 1, None).unwrap();
    let cfg = TrainConfig { batch: 64, accumulation: 4, ..quick(1) };
    let loss = train(p, PolicyMode::Baseline, &eps, &stats, &cfg, 2, None).unwrap().metrics[0].loss;
    assert!((loss - expect).abs() <= 0.1 * expect, "step-0 loss {loss}, mean |target| {expect}");
}

#[test]
fn overfits_a_single_episode() {
    let sim = sim();
    let ep = run_expert_episode(&sim, 1, 2, &DegradationConfig::healthy(), None).unwrap();
    let eps = vec![ep];
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let p = init_policy(PolicyMode::Baseline, config(&sim), &eps, 1, None).unwrap();
    let cfg = TrainConfig {
        lr: 5e-3,
        warmup_steps: 20,
        decay_step: 450,
        clip_norm: 10.0,
        batch: 64,
        optimizer: faultarm::nn::AdamWConfig { weight_decay: 0.0, ..Default::default() },
        ..quick(500)
    };
    let policy = train(p, PolicyMode::Baseline, &eps, &stats, &cfg, 3, None).unwrap().policy;
    let mut total = 0.0;
    for t in 0..eps[0].steps.len() {
        let s = sample_at(&eps[0], t, 8, &stats);
        let out = policy.forward(&s.obs, &s.proprio, &s.health).unwrap();
        total += faultarm::nn::l1_loss(&out, &s.target).0;
    }
    let l1 = total / eps[0].steps.len() as f64;
    assert!(l1 < 0.02, "training L1 {l1}");
}

#[test]
fn nan_observation_aborts() {
    let sim = sim();
    let mut eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let p = init_policy(PolicyMode::Baseline, config(&sim), &eps, 1, None).unwrap();
    for ep in &mut eps {
        for s in &mut ep.steps {
            s.observation.gripper = f64::NAN;
        }
    }
    let err = train(p, PolicyMode::Baseline, &eps, &stats, &quick(5), 0, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn health_sensitivity_appears_after_training() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let p = init_policy(PolicyMode::Health, config(&sim), &eps, 1, None).unwrap();
    let s = sample_at(&eps[0], 3, 8, &stats);
    let sensitivity = |p: &faultarm::Policy| {
        let mut h = s.health.clone();
        h[1] = 0.6 + 1e-5;
        let up = p.forward(&s.obs, &s.proprio, &h).unwrap();
        h[1] = 0.6 - 1e-5;
        let down = p.forward(&s.obs, &s.proprio, &h).unwrap();
        up.iter().zip(&down).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / 2e-5
    };
    assert_eq!(sensitivity(&p), 0.0);
    let trained = train(p, PolicyMode::Health, &eps, &stats, &quick(10), 0, None).unwrap().policy;
    assert!(sensitivity(&trained) > 1e-6);
}

#[test]
fn frozen_trunk_updates_only_projector_and_query() {
    let sim = sim();
    let eps = dataset(&sim);
    let stats = compute_norm_stats(&eps, 0.01, 0.99).unwrap();
    let base = init_policy(PolicyMode::Baseline, config(&sim), &eps, 1, None).unwrap();
    let base = train(base, PolicyMode::Baseline, &eps, &stats, &quick(10), 0, None).unwrap().policy;
    assert!(init_policy(PolicyMode::FrozenTrunk, config(&sim), &eps, 1, None).is_err());
    let p = init_policy(PolicyMode::FrozenTrunk, config(&sim), &eps, 1, Some(&base)).unwrap();
    assert!(init_policy(PolicyMode::FrozenTrunk, config(&sim), &eps, 1, Some(&p)).is_err());
    let out = train(p.clone(), PolicyMode::FrozenTrunk, &eps, &stats, &quick(10), 0, None).unwrap().policy;
    assert_eq!(out.obs_embed, base.obs_embed);
    assert_eq!(out.blocks, base.blocks);
    assert_eq!(out.head, base.head);
    assert_eq!(out.obs_norm, base.obs_norm);
    assert_ne!(out.query, base.query);
    assert_ne!(out.projector, p.projector);
}
