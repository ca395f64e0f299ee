//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use faultarm::episode::{self, Episode};
use faultarm::eval::EvalMatrix;
use faultarm::expert::run_expert_episode;
use faultarm::nn::l1_loss;
use faultarm::norm::{quantile, NormStats};
use faultarm::policy::{count_parameters, InputNorm, PolicyConfig, PolicyMode};
use faultarm::sim::default_scene;
use faultarm::{Action, DegradationConfig, HealthVector, Policy, Sim};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    let detail = format!("{detail}; {:.1}s (budget {}s)", took.as_secs_f64(), budget.as_secs());
    check(took <= budget, detail)
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn zero_init() -> Outcome {
    let start = Instant::now();
    let config = PolicyConfig::desk(24, 4);
    let mut base = Policy::baseline(config, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flat = uniform(&mut rng, base.flat_params().len(), -0.3, 0.3);
    base.set_flat_params(&flat);
    let cond = base.clone().with_projector(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let obs = uniform(&mut rng, 24, -2.0, 2.0);
        let proprio = uniform(&mut rng, 4, -1.0, 1.0);
        let h = uniform(&mut rng, 4, 0.0, 1.0);
        let a = base.forward(&obs, &proprio, &h).map_err(|e| e.to_string())?;
        let b = cond.forward(&obs, &proprio, &h).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("max abs diff {worst:e} over 1000 pairs"));
    }
    within(Duration::from_secs(10), start, format!("max abs diff {worst:e} over 1000 pairs"))
}

fn gradients() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let cases = 120;
    for case in 0..cases {
        let config = PolicyConfig {
            obs_dim: rng.gen_range(1..=12),
            proprio_dim: rng.gen_range(1..=4),
            joints: rng.gen_range(1..=5),
            embed_dim: rng.gen_range(1..=8),
            projector_hidden: rng.gen_range(1..=8),
            blocks: rng.gen_range(0..=3),
            block_hidden: rng.gen_range(1..=8),
            chunk: rng.gen_range(1..=3),
            action_dim: rng.gen_range(1..=4),
        };
        let mode = if case % 4 == 0 { PolicyMode::Baseline } else { PolicyMode::Health };
        let mut policy = Policy::new(config, mode, rng.gen());
        let flat = uniform(&mut rng, policy.flat_params().len(), -0.8, 0.8);
        policy.set_flat_params(&flat);
        policy.obs_norm = InputNorm {
            mean: uniform(&mut rng, config.obs_dim, -0.5, 0.5),
            std: uniform(&mut rng, config.obs_dim, 0.5, 2.0),
        };
        let obs = uniform(&mut rng, config.obs_dim, -1.5, 1.5);
        let proprio = uniform(&mut rng, config.proprio_dim, -1.0, 1.0);
        let mut health = uniform(&mut rng, config.joints, 0.0, 1.0);
        let (out, tape) = policy.forward_tape(&obs, &proprio, &health);
        let target: Vec<f64> = out
            .iter()
            .map(|o| o + rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let (_, d_out) = l1_loss(&out, &target);
        let mut grad = policy.zeros_like();
        let dh = policy.backward(&tape, &d_out, &mut grad);
        let loss = |p: &Policy, h: &[f64]| l1_loss(&p.forward(&obs, &proprio, h).unwrap(), &target).0;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

        let analytic = grad.flat_params();
        let mut probe = policy.clone();
        let mut params = policy.flat_params();
        for k in 0..params.len() {
            let orig = params[k];
            params[k] = orig + H;
            probe.set_flat_params(&params);
            let up = loss(&probe, &health);
            params[k] = orig - H;
            probe.set_flat_params(&params);
            let down = loss(&probe, &health);
            params[k] = orig;
            worst = worst.max(rel(analytic[k], (up - down) / (2.0 * H)));
            checked += 1;
        }
        if policy.projector.is_some() {
            for j in 0..config.joints {
                let orig = health[j];
                health[j] = orig + H;
                let up = loss(&policy, &health);
                health[j] = orig - H;
                let down = loss(&policy, &health);
                health[j] = orig;
                worst = worst.max(rel(dh[j], (up - down) / (2.0 * H)));
                checked += 1;
            }
        }
    }
    let detail = format!("{cases} configurations, {checked} partials, max rel err {worst:.2e}");
    if worst > 1e-4 {
        return Err(detail);
    }
    within(Duration::from_secs(60), start, detail)
}

fn degradation() -> Outcome {
    let sim = Sim::new(default_scene()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random_action = |rng: &mut ChaCha8Rng| Action {
        d_ee: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)],
        d_yaw: rng.gen_range(-0.3..0.3),
        d_grip: rng.gen_range(-1.5..1.5),
    };
    let (mut steps, mut escapes, mut moved_locked) = (0, 0, 0);
    while steps < 10_000 {
        let h: Vec<f64> = (0..sim.joints())
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..=1.0),
            })
            .collect();
        let health = HealthVector::new(h).map_err(|e| e.to_string())?;
        let limits = sim.model().limits(&health).map_err(|e| e.to_string())?;
        let task = rng.gen_range(0..sim.scene().num_tasks());
        let mut state = sim.reset(task, rng.gen(), &health).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let before = state.q.clone();
            state = sim.step(&state, &random_action(&mut rng), &health).map_err(|e| e.to_string())?;
            for (j, (&q, &(lo, hi))) in state.q.iter().zip(&limits).enumerate() {
                escapes += usize::from(q < lo || q > hi);
                moved_locked += usize::from(health.get(j) == 0.0 && q.to_bits() != before[j].to_bits());
            }
            steps += 1;
        }
    }
    let healthy = HealthVector::healthy(sim.joints());
    let mut diverged = 0;
    let mut nominal_steps = 0;
    for episode in 0..20u64 {
        let mut a = sim.reset(episode as usize % 4, episode, &healthy).map_err(|e| e.to_string())?;
        let mut b = a.clone();
        for _ in 0..250 {
            let act = random_action(&mut rng);
            a = sim.step(&a, &act, &healthy).map_err(|e| e.to_string())?;
            b = sim.step_nominal(&b, &act).map_err(|e| e.to_string())?;
            let same = a.q.iter().zip(&b.q).all(|(x, y)| x.to_bits() == y.to_bits()) && a == b;
            diverged += usize::from(!same);
            nominal_steps += 1;
        }
    }
    check(
        escapes == 0 && moved_locked == 0 && diverged == 0,
        format!(
            "{steps} fuzz steps: {escapes} limit escapes, {moved_locked} locked-joint moves; \
             {diverged}/{nominal_steps} full-health steps differ from the nominal path"
        ),
    )
}

fn expert_rate(sim: &Sim, deg: &DegradationConfig, n: usize, seed_base: u64) -> Result<(usize, Vec<Episode>), String> {
    let mut wins = 0;
    let mut eps = Vec::with_capacity(n);
    for i in 0..n {
        let task = i % sim.scene().num_tasks();
        let ep = run_expert_episode(sim, task, seed_base + i as u64, deg, None).map_err(|e| e.to_string())?;
        wins += usize::from(ep.meta.success);
        eps.push(ep);
    }
    Ok((wins, eps))
}

fn expert_gate() -> Outcome {
    let start = Instant::now();
    let sim = Sim::new(default_scene()).map_err(|e| e.to_string())?;
    let (healthy, first) = expert_rate(&sim, &DegradationConfig::healthy(), 100, 1000)?;
    let distal = DegradationConfig::single(3, 0.5);
    let (weak, _) = expert_rate(&sim, &distal, 100, 2000)?;
    let (_, again) = expert_rate(&sim, &DegradationConfig::healthy(), 100, 1000)?;
    let deterministic = first == again;
    let detail = format!(
        "healthy {healthy}/100, J3 w=0.5 {weak}/100, repeat run identical: {deterministic}"
    );
    if healthy < 90 || weak < 50 || !deterministic {
        return Err(detail);
    }
    within(Duration::from_secs(120), start, detail)
}

struct Cli {
    dir: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_faultarm"))
            .args(args)
            .current_dir(&self.dir)
            .env_remove("FAULTARM_SEED")
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            return Err(format!("faultarm {} failed: {}", args.join(" "), err.trim()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn matrix(&self, path: &str) -> Result<EvalMatrix, String> {
        let text = std::fs::read_to_string(self.dir.join(path)).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

fn rate(m: &EvalMatrix, joint: usize, level: f64) -> Result<f64, String> {
    m.cell(joint, level)
        .map(|c| c.rate() * 100.0)
        .ok_or_else(|| format!("matrix has no J{joint} w={level} cell"))
}

/// Baseline on healthy demonstrations, health-conditioned model on the mixed
/// default dataset, both evaluated on shoulder weakness with 13 episodes per
/// task (52 per cell).
fn trend(cli: &Cli) -> Outcome {
    let start = Instant::now();
    cli.run(&["collect-expert"])?;
    cli.run(&["stats", "--healthy-only", "--out", "data/stats_healthy.json"])?;
    cli.run(&["stats"])?;
    cli.run(&["train", "--mode", "baseline", "--healthy-only", "--stats", "data/stats_healthy.json"])?;
    cli.run(&["train", "--mode", "health", "--stats", "data/stats.json"])?;
    let eval = ["--levels", "0.3,0.5,0.7,1", "--joints", "1", "--episodes", "13"];
    let mut args = vec!["eval", "--ckpt", "ckpt/baseline", "--out", "report/baseline"];
    args.extend_from_slice(&eval);
    cli.run(&args)?;
    let mut args = vec!["eval", "--ckpt", "ckpt/health", "--out", "report/health"];
    args.extend_from_slice(&eval);
    cli.run(&args)?;
    let base = cli.matrix("report/baseline/matrix.json")?;
    let ours = cli.matrix("report/health/matrix.json")?;
    let episodes = base.healthy.total.episodes;

    let (bh, oh) = (base.healthy.rate() * 100.0, ours.healthy.rate() * 100.0);
    let a = (bh - oh).abs() <= 5.0;
    let moderate = [0.3, 0.5, 0.7]
        .into_iter()
        .find(|&w| rate(&base, 1, w).is_ok_and(|r| r < 50.0));
    let (b, b_detail) = match moderate {
        Some(w) => {
            let (bw, ow) = (rate(&base, 1, w)?, rate(&ours, 1, w)?);
            (ow - bw >= 20.0, format!("J1 w={w} {bw:.1} -> {ow:.1}"))
        }
        None => (false, "baseline never drops below 50% on J1".into()),
    };
    let (bl, ol) = (rate(&base, 1, 1.0)?, rate(&ours, 1, 1.0)?);
    let c = bl <= 2.0 && ol <= 2.0;
    let detail = format!(
        "{episodes} episodes per cell; (a) healthy {bh:.1} vs {oh:.1}; (b) {b_detail}; (c) J1 w=1 {bl:.1} / {ol:.1}"
    );
    if !(a && b && c && episodes >= 50) {
        return Err(detail);
    }
    within(Duration::from_secs(30 * 60), start, detail)
}

fn normalization() -> Outcome {
    let oracle = |values: &[f64], q: f64| {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let grid: Vec<f64> = (1..=100).map(f64::from).collect();
    let q99 = quantile(&grid, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let mut v: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-100i32..100))).collect();
        v.shuffle(&mut rng);
        let q = rng.gen_range(0.0..=1.0);
        mismatches += usize::from(quantile(&v, q) != oracle(&v, q));
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let n = rng.gen_range(2..60);
                uniform(&mut rng, n, -5.0, 5.0)
            })
            .collect();
        let s = NormStats::from_columns(&cols, 0.01, 0.99).map_err(|e| e.to_string())?;
        let a: Vec<f64> = (0..4)
            .map(|d| s.q_low[d] + rng.gen_range(0.0..=1.0) * (s.q_high[d] - s.q_low[d]))
            .collect();
        for (x, y) in a.iter().zip(s.denormalize(&s.normalize(&a))) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        q99 == 99.01 && mismatches == 0 && worst <= 1e-9,
        format!("q99 of 1..100 = {q99}; {mismatches}/1000 oracle mismatches; round trip max err {worst:.1e}"),
    )
}

/// Round trip and replay over the default dataset written by `collect-expert`.
fn persistence(cli: &Cli) -> Outcome {
    let path = cli.dir.join("data/expert.jsonl");
    if !path.is_file() {
        cli.run(&["collect-expert"])?;
    }
    let (header, eps) = episode::load(&path).map_err(|e| e.to_string())?;
    let copy = cli.dir.join("roundtrip.jsonl");
    episode::save(&eps, &copy, header.joints, header.tasks).map_err(|e| e.to_string())?;
    let (header2, eps2) = episode::load(&copy).map_err(|e| e.to_string())?;
    let equal = header == header2 && eps == eps2;
    let bytes = std::fs::read(&path).ok() == std::fs::read(&copy).ok();
    let out = cli.run(&["replay", "data/expert.jsonl"])?;
    let confirmed = out.lines().filter(|l| l.ends_with(" ok")).count();
    check(
        equal && bytes && confirmed == eps.len() && !eps.is_empty(),
        format!(
            "{} episodes: reload equal {equal}, bytes identical {bytes}; replay confirmed {confirmed}/{}",
            eps.len(),
            eps.len()
        ),
    )
}

fn parameters() -> Outcome {
    let wide = PolicyConfig {
        obs_dim: 1,
        proprio_dim: 1,
        joints: 7,
        embed_dim: 896,
        projector_hidden: 896,
        blocks: 0,
        block_hidden: 1,
        chunk: 1,
        action_dim: 1,
    };
    let big = count_parameters(&Policy::new(wide, PolicyMode::Health, 0)).projector;
    let desk = count_parameters(&Policy::new(PolicyConfig::desk(24, 4), PolicyMode::Health, 0));
    check(
        big == 810_880 && desk.projector == 4_480,
        format!(
            "projector 7->896->896: {big}; desk projector 4->64->64: {} (desk total {})",
            desk.projector, desk.total
        ),
    )
}

fn smoke(cli: &Cli, workers: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let w = ["--seed", "11", "--workers", workers];
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend_from_slice(&w);
        cli.run(&all)
    };
    run(&["collect-expert", "--healthy", "2", "--per-cell", "0", "--out", "data/smoke.jsonl"])?;
    run(&["stats", "--data", "data/smoke.jsonl", "--out", "data/stats.json"])?;
    run(&["train", "--mode", "health", "--stats", "data/stats.json", "--steps", "50", "--out", "ckpt"])?;
    run(&["eval", "--ckpt", "ckpt/final", "--healthy-only", "--tasks", "0", "--episodes", "2", "--out", "report"])?;
    let files = [
        "data/smoke.jsonl",
        "data/stats.json",
        "ckpt/final.json",
        "ckpt/metrics.csv",
        "report/matrix.json",
        "report/matrix.csv",
        "report/matrix.md",
        "report/per_task.csv",
    ];
    files
        .iter()
        .map(|f| {
            std::fs::read(cli.dir.join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| format!("{f}: {e}"))
        })
        .collect()
}

fn determinism(root: &Path) -> Outcome {
    let mut runs = Vec::new();
    for (i, workers) in ["1", "1", "4"].iter().enumerate() {
        let dir = root.join(format!("smoke_{i}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        runs.push(smoke(&Cli { dir }, workers)?);
    }
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .zip(&runs[2])
        .filter(|(((_, a), (_, b)), (_, c))| a != b || a != c)
        .map(|(((name, _), _), _)| name.as_str())
        .collect();
    check(
        differing.is_empty(),
        format!(
            "{} artifacts compared over 3 runs (workers 1, 1, 4); differing: {:?}",
            runs[0].len(),
            differing
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let cli = Cli {
        dir: root.path().join("pipeline"),
    };
    std::fs::create_dir_all(&cli.dir).expect("pipeline dir");

    let criteria: Vec<Criterion> = vec![
        ("zero-init preservation", Box::new(zero_init)),
        ("gradient exactness", Box::new(gradients)),
        ("degradation semantics", Box::new(degradation)),
        ("expert quality gate", Box::new(expert_gate)),
        ("trend reproduction", Box::new(|| trend(&cli))),
        ("normalization", Box::new(normalization)),
        ("persistence", Box::new(|| persistence(&cli))),
        ("parameter accounting", Box::new(parameters)),
        ("determinism", Box::new(|| determinism(root.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
