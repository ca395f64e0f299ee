use std::path::{Path, PathBuf};

use faultarm::config::RunConfig;
use faultarm::episode::{self, Episode};
use faultarm::eval::{run_matrix, EvalMatrix, EvalPlan, ExpertController, PolicyController};
use faultarm::expert::{collect_episodes, default_jobs};
use faultarm::norm::compute_norm_stats;
use faultarm::policy::count_parameters;
use faultarm::report::{render_comparison, render_matrix, render_per_task, Format};
use faultarm::train::{init_policy, train};
use faultarm::{Checkpoint, NormStats, Policy, PolicyConfig, PolicyMode, SceneConfig, Sim};

use crate::{Command, Failure};

type Res<T = ()> = Result<T, Failure>;

/// Folds subcommand flags into the run configuration before validation.
pub(crate) fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match command {
        Command::CollectExpert(a) => {
            set(&mut cfg.collect.levels, &a.levels);
            if a.tasks.is_some() {
                cfg.collect.tasks = a.tasks.clone();
            }
            set(&mut cfg.collect.per_cell, &a.per_cell);
            set(&mut cfg.collect.healthy, &a.healthy);
        }
        Command::Stats(a) => {
            set(&mut cfg.stats.low_quantile, &a.low);
            set(&mut cfg.stats.high_quantile, &a.high);
        }
        Command::Train(a) => {
            set(&mut cfg.train.steps, &a.steps);
            set(&mut cfg.train.batch, &a.batch);
            set(&mut cfg.train.lr, &a.lr);
            set(&mut cfg.train.checkpoint_every, &a.checkpoint_every);
        }
        Command::Eval(a) => {
            set(&mut cfg.eval.levels, &a.levels);
            if a.joints.is_some() {
                cfg.eval.joints = a.joints.clone();
            }
            if a.tasks.is_some() {
                cfg.eval.tasks = a.tasks.clone();
            }
            set(&mut cfg.eval.episodes_per_task, &a.episodes);
            set(&mut cfg.eval.replan_every, &a.replan_every);
        }
        _ => {}
    }
}

pub(crate) fn dispatch(cfg: &RunConfig, scene: SceneConfig, command: Command) -> Res {
    let sim = Sim::new(scene)?;
    match command {
        Command::CollectExpert(a) => collect(cfg, &sim, a.out),
        Command::Stats(a) => stats(cfg, a.data, a.out, a.healthy_only),
        Command::Train(a) => train_cmd(cfg, &sim, a),
        Command::Eval(a) => eval_cmd(cfg, &sim, a),
        Command::Report(a) => report(a),
        Command::TeleopServe(a) => teleop(cfg, sim, a),
        Command::Replay(a) => replay(&sim, &a.file, a.episode),
        Command::Describe(a) => describe(&sim, a.ckpt),
        Command::Render(a) => render(&sim, &a.file, a.episode, &a.out, a.every),
    }
}

fn load_episodes(path: &Path, healthy_only: bool) -> Res<Vec<Episode>> {
    let mut eps = episode::load_dir(path)?;
    if healthy_only {
        eps.retain(|e| e.meta.degradation.is_healthy());
    }
    Ok(eps)
}

fn create_parent(path: &Path) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Res {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn collect(cfg: &RunConfig, sim: &Sim, out: Option<PathBuf>) -> Res {
    let out = out.unwrap_or_else(|| cfg.data_dir.join("expert.jsonl"));
    let c = &cfg.collect;
    let mut jobs = default_jobs(sim.joints(), &c.levels, c.per_cell, c.healthy);
    jobs.retain(|j| j.episodes > 0);
    let tasks = cfg.collect_tasks(sim.scene());
    let (episodes, report) = collect_episodes(sim, &tasks, &jobs, cfg.seed)?;
    for (deg, attempted, kept) in &report.per_job {
        println!("{deg}: kept {kept}/{attempted}");
    }
    create_parent(&out)?;
    episode::save(&episodes, &out, sim.joints(), sim.scene().num_tasks())?;
    println!(
        "wrote {} episodes ({} steps) to {}",
        episodes.len(),
        episode::total_steps(&episodes),
        out.display()
    );
    Ok(())
}

fn stats(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, healthy_only: bool) -> Res {
    let data = data.unwrap_or_else(|| cfg.data_dir.clone());
    let out = out.unwrap_or_else(|| cfg.data_dir.join("stats.json"));
    let eps = load_episodes(&data, healthy_only)?;
    let stats = compute_norm_stats(&eps, cfg.stats.low_quantile, cfg.stats.high_quantile)?;
    create_parent(&out)?;
    stats.save(&out)?;
    println!("stats over {} steps written to {}", episode::total_steps(&eps), out.display());
    Ok(())
}

fn load_stats(path: &Path) -> Res<NormStats> {
    NormStats::load(path).map_err(|e| {
        let f = Failure::from(e);
        Failure::new(f.kind, format!("{}: {}", path.display(), f.message))
    })
}

/// Accepts a checkpoint file, the same path without `.json`, or a training
/// directory (its `final.json`).
fn resolve_ckpt(path: &Path) -> Res<PathBuf> {
    if path.is_dir() {
        return Ok(path.join("final.json"));
    }
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let mut with_ext = path.as_os_str().to_owned();
    with_ext.push(".json");
    let with_ext = PathBuf::from(with_ext);
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    Err(Failure::new("io", format!("{}: no such checkpoint", path.display())))
}

fn load_policy(path: &Path) -> Res<(Checkpoint, Policy)> {
    let ckpt = Checkpoint::load(path)?;
    let policy = ckpt.to_policy()?;
    Ok((ckpt, policy))
}

fn train_cmd(cfg: &RunConfig, sim: &Sim, a: crate::TrainArgs) -> Res {
    let mode: PolicyMode = a.mode.parse()?;
    let data = a.data.unwrap_or_else(|| cfg.data_dir.clone());
    let out = a.out.unwrap_or_else(|| cfg.checkpoint_dir.join(mode.to_string()));
    let eps = load_episodes(&data, a.healthy_only)?;
    let stats = load_stats(&a.stats)?;
    let base = match &a.base {
        Some(p) => Some(load_policy(&resolve_ckpt(p)?)?.1),
        None => None,
    };
    let pc = PolicyConfig::desk(sim.scene().observation_dim(), sim.joints());
    let policy = init_policy(mode, pc, &eps, cfg.seed, base.as_ref())?;
    let outcome = train(policy, mode, &eps, &stats, &cfg.train, cfg.seed.wrapping_add(1), Some(&out))?;
    stats.save(&out.join("stats.json"))?;
    let m = &outcome.metrics;
    if let (Some(first), Some(last)) = (m.first(), m.last()) {
        println!("{mode}: {} steps, loss {:.4} -> {:.4}", m.len(), first.loss, last.loss);
    }
    println!("checkpoint written to {}", out.join("final.json").display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, sim: &Sim, a: crate::EvalArgs) -> Res {
    let scene = sim.scene();
    let tasks = cfg.eval_tasks(scene);
    let joints = if a.healthy_only { Vec::new() } else { cfg.eval_joints(scene) };
    let levels = if a.healthy_only { Vec::new() } else { cfg.eval.levels.clone() };
    let plan = EvalPlan {
        episodes_per_task: cfg.eval.episodes_per_task,
        seed_base: cfg.seed,
    };
    let (name, matrix) = match &a.ckpt {
        Some(p) => {
            let path = resolve_ckpt(p)?;
            let (ckpt, policy) = load_policy(&path)?;
            let stats_path = a
                .stats
                .clone()
                .unwrap_or_else(|| path.with_file_name("stats.json"));
            let stats = load_stats(&stats_path)?;
            let replan = cfg.eval.replan_every;
            PolicyController::new(&policy, &stats, replan)?;
            let make = || PolicyController::new(&policy, &stats, replan);
            (ckpt.mode.to_string(), run_matrix(sim, &make, &joints, &levels, &tasks, plan)?)
        }
        None => {
            let make = || Ok(ExpertController::default());
            ("expert".to_string(), run_matrix(sim, &make, &joints, &levels, &tasks, plan)?)
        }
    };
    let out = a.out.unwrap_or_else(|| cfg.report_dir.clone());
    let json = serde_json::to_string_pretty(&matrix).map_err(faultarm::Error::from)?;
    write_file(&out.join("matrix.json"), &(json + "\n"))?;
    write_file(&out.join("matrix.csv"), &render_matrix(&matrix, Format::Csv))?;
    let md = render_matrix(&matrix, Format::Markdown);
    write_file(&out.join("matrix.md"), &md)?;
    write_file(
        &out.join("per_task.csv"),
        &render_per_task(&[(name.as_str(), &matrix)], Format::Csv),
    )?;
    print!("{md}");
    println!("{} cells written to {}", matrix.cell_count(), out.display());
    Ok(())
}

fn load_matrix(path: &Path) -> Res<EvalMatrix> {
    let path = if path.is_dir() { path.join("matrix.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new("parse", format!("{}: {e}", path.display())))
}

fn report(a: crate::ReportArgs) -> Res {
    let base = load_matrix(&a.baseline)?;
    let ours = load_matrix(&a.ours)?;
    if base.joints != ours.joints || base.levels != ours.levels || base.tasks != ours.tasks {
        return Err(Failure::new("config", "matrices cover different grids"));
    }
    let format: Format = a.format.parse()?;
    let text = if a.per_task {
        render_per_task(&[("Baseline", &base), ("Ours", &ours)], format)
    } else {
        render_comparison(&base, &ours, format)
    };
    match a.out {
        Some(p) => write_file(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn teleop(cfg: &RunConfig, sim: Sim, a: crate::TeleopArgs) -> Res {
    let io = |e: std::io::Error| Failure::new("io", e.to_string());
    let config = faultarm_teleop::ServerConfig {
        scene: sim.scene().clone(),
        tick_hz: a.tick_hz,
        out_dir: a.out.unwrap_or_else(|| cfg.data_dir.join("teleop")),
        seed: cfg.seed,
    };
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = cfg.workers {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().map_err(io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await.map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        println!("listening on ws://{addr}/ws");
        faultarm_teleop::serve(listener, config).await.map_err(io)
    })
}

fn replay(sim: &Sim, file: &Path, only: Option<usize>) -> Res {
    let (header, eps) = episode::load(file)?;
    if header.joints != sim.joints() || header.tasks != sim.scene().num_tasks() {
        return Err(Failure::new(
            "config",
            format!(
                "{} was recorded for {} joints and {} tasks; the scene has {} and {}",
                file.display(),
                header.joints,
                header.tasks,
                sim.joints(),
                sim.scene().num_tasks()
            ),
        ));
    }
    let indices: Vec<usize> = match only {
        Some(i) if i >= eps.len() => {
            return Err(Failure::new(
                "config",
                format!("episode {i} out of range ({} stored)", eps.len()),
            ))
        }
        Some(i) => vec![i],
        None => (0..eps.len()).collect(),
    };
    let mut mismatches = 0;
    for &i in &indices {
        let e = &eps[i];
        let replayed = e.replay(sim)?;
        let ok = replayed == e.meta.success;
        mismatches += usize::from(!ok);
        println!(
            "episode {i} task {} seed {} steps {} stored={} replayed={replayed} {}",
            e.meta.task_id,
            e.meta.seed,
            e.len(),
            e.meta.success,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    if mismatches > 0 {
        return Err(Failure::new(
            "replay",
            format!("{mismatches} of {} episodes disagree with their stored success flag", indices.len()),
        ));
    }
    println!("replayed {} episodes, all flags confirmed", indices.len());
    Ok(())
}

fn describe(sim: &Sim, ckpt: Option<PathBuf>) -> Res {
    let (mode, policy) = match ckpt {
        Some(p) => {
            let (c, policy) = load_policy(&resolve_ckpt(&p)?)?;
            (c.mode, policy)
        }
        None => {
            let pc = PolicyConfig::desk(sim.scene().observation_dim(), sim.joints());
            (PolicyMode::Health, Policy::new(pc, PolicyMode::Health, 0))
        }
    };
    let c = count_parameters(&policy);
    println!("mode {mode}");
    for (name, n) in [
        ("obs_embed", c.obs_embed),
        ("proprio_embed", c.proprio_embed),
        ("query", c.query),
        ("trunk", c.trunk),
        ("head", c.head),
        ("projector", c.projector),
        ("total", c.total),
    ] {
        println!("{name} {n}");
    }
    Ok(())
}

fn render(sim: &Sim, file: &Path, index: usize, out: &Path, every: usize) -> Res {
    let (_, eps) = episode::load(file)?;
    let ep = eps.get(index).ok_or_else(|| {
        Failure::new("config", format!("episode {index} out of range ({} stored)", eps.len()))
    })?;
    let n = faultarm::render::render_episode(sim, ep, out, every)?;
    println!("{n} frames written to {}", out.display());
    Ok(())
}
