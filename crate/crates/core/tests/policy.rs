use faultarm::nn::{clip_global_norm, gelu, global_norm, lr_at, AdamW, AdamWConfig};
use faultarm::policy::{count_parameters, HealthProjector, PolicyConfig, PolicyMode};
use faultarm::Policy;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> PolicyConfig {
    PolicyConfig::desk(24, 4)
}

fn randomized_baseline(seed: u64) -> Policy {
    let mut p = Policy::baseline(desk(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let flat: Vec<f64> = (0..p.flat_params().len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    p.set_flat_params(&flat);
    p
}

#[test]
fn zero_init_preserves_baseline_outputs() {
    let base = randomized_baseline(4);
    let cond = base.clone().with_projector(99);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let obs: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let proprio: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let a = base.forward(&obs, &proprio, &h).unwrap();
        let b = cond.forward(&obs, &proprio, &h).unwrap();
        assert_eq!(a.len(), 32);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-12, "max abs diff {worst}");
}

#[test]
fn fresh_modes_share_weights() {
    let b = Policy::new(desk(), PolicyMode::Baseline, 3);
    let h = Policy::new(desk(), PolicyMode::Health, 3);
    assert_eq!(b.obs_embed, h.obs_embed);
    assert_eq!(b.blocks, h.blocks);
    let p = h.projector.as_ref().unwrap();
    assert!(p.layer2.w.iter().chain(&p.layer2.b).all(|&v| v == 0.0));
    assert!(p.layer1.w.iter().any(|&v| v != 0.0));
}

#[test]
fn projector_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = HealthProjector::zeros(4, 64, 64);
    for v in p
        .layer1
        .w
        .iter_mut()
        .chain(&mut p.layer1.b)
        .chain(&mut p.layer2.w)
        .chain(&mut p.layer2.b)
    {
        *v = rng.gen_range(-1.0..1.0);
    }
    let h = [1.0, 0.3, 1.0, 1.0];
    let w1 = DMatrix::from_row_slice(64, 4, &p.layer1.w);
    let w2 = DMatrix::from_row_slice(64, 64, &p.layer2.w);
    let hidden = (w1 * DVector::from_row_slice(&h) + DVector::from_row_slice(&p.layer1.b)).map(gelu);
    let expect = w2 * hidden + DVector::from_row_slice(&p.layer2.b);
    let got = p.forward(&h).unwrap();
    for (g, e) in got.iter().zip(expect.iter()) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn parameter_counts() {
    let wide = HealthProjector::zeros(7, 896, 896);
    assert_eq!(wide.param_count(), (7 * 896 + 896) + (896 * 896 + 896));
    assert_eq!(wide.param_count(), 810_880);
    let h = Policy::new(desk(), PolicyMode::Health, 0);
    let counts = count_parameters(&h);
    assert_eq!(counts.projector, 4_480);
    assert_eq!(counts.query, 64);
    assert_eq!(counts.total, h.flat_params().len());
    assert_eq!(count_parameters(&Policy::new(desk(), PolicyMode::Baseline, 0)).projector, 0);
}

#[test]
fn task_onehot_wiring_is_permutation_consistent() {
    let base = randomized_baseline(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // the last four features are the task one-hot
    let perm = [2usize, 0, 3, 1];
    let mut permuted = base.clone();
    let inputs = base.obs_embed.inputs;
    for r in 0..base.obs_embed.outputs {
        for (t, &pt) in perm.iter().enumerate() {
            permuted.obs_embed.w[r * inputs + 20 + pt] = base.obs_embed.w[r * inputs + 20 + t];
        }
    }
    for task in 0..4 {
        let mut obs: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        obs[20..].iter_mut().for_each(|v| *v = 0.0);
        let mut obs_p = obs.clone();
        obs[20 + task] = 1.0;
        obs_p[20 + perm[task]] = 1.0;
        let proprio = [0.1, 0.2, -1.0, 1.0];
        let a = base.forward(&obs, &proprio, &[]).unwrap();
        let b = permuted.forward(&obs_p, &proprio, &[]).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn clipping_keeps_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let orig: Vec<f64> = a.iter().chain(&b).copied().collect();
        let flat_norm = orig.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(global_norm(&[&a, &b]), flat_norm);
        let reported = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(reported, flat_norm);
        let clipped: Vec<f64> = a.iter().chain(&b).copied().collect();
        let n = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        if flat_norm > 1.0 {
            assert!((n - 1.0).abs() < 1e-12);
        } else {
            assert_eq!(clipped, orig);
        }
        let cos = clipped.iter().zip(&orig).map(|(x, y)| x * y).sum::<f64>() / (n * flat_norm);
        assert!((cos - 1.0).abs() < 1e-12);
    }
    let mut small = vec![0.3, 0.4];
    clip_global_norm(&mut [&mut small], 1.0);
    assert_eq!(small, vec![0.3, 0.4]);
}

#[test]
fn schedule_values() {
    assert_eq!(lr_at(10_000, 2e-4, 500, 10_000, 0.1).unwrap(), 2e-4 * 0.1);
    assert_eq!(lr_at(250, 2e-4, 500, 10_000, 0.1).unwrap(), 1e-4);
    assert_eq!(lr_at(0, 2e-4, 500, 10_000, 0.1).unwrap(), 0.0);
    assert_eq!(lr_at(500, 2e-4, 500, 10_000, 0.1).unwrap(), 2e-4);
    assert!(lr_at(0, 2e-4, 500, 500, 0.1).is_err());
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(cfg, &[3]);
    let mut p = vec![0.5, -1.0, 2.0];
    for _ in 0..10 {
        opt.step(1e-3, &mut [&mut p], &[&[0.0; 3]]).unwrap();
    }
    assert_eq!(p, vec![0.5, -1.0, 2.0]);
    assert!(opt.step(1e-3, &mut [&mut p], &[&[0.0; 2]]).is_err());
}

#[test]
fn adamw_runs_are_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut opt = AdamW::new(AdamWConfig::default(), &[16]);
        let mut p: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v + rng.gen_range(-0.1..0.1)).collect();
            opt.step(1e-2, &mut [&mut p], &[&g]).unwrap();
        }
        p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
