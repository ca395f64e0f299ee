//! SVG debug frames of the planar scene.

use std::fmt::Write as _;
use std::path::Path;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::health::HealthVector;
use crate::sim::{ArmState, Sim};

const SIZE: f64 = 480.0;
const SCALE: f64 = 300.0;

fn px(p: [f64; 2]) -> (f64, f64) {
    (SIZE / 2.0 + p[0] * SCALE, SIZE * 0.6 - p[1] * SCALE)
}

/// Green at full health, red when locked.
pub fn health_color(h: f64) -> String {
    let h = h.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - h)).round() as u8;
    let g = (200.0 * h).round() as u8;
    format!("#{r:02x}{g:02x}40")
}

/// One frame as a standalone SVG document.
pub fn svg_frame(sim: &Sim, state: &ArmState, health: &HealthVector) -> String {
    let links = &sim.model().link_lengths;
    let mut pts = vec![[0.0, 0.0]];
    let mut angle = 0.0;
    for (l, q) in links.iter().zip(&state.q) {
        angle += q;
        let last = pts[pts.len() - 1];
        pts.push([last[0] + l * angle.cos(), last[1] + l * angle.sin()]);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#fafafa"/>"##);
    let (tx, ty) = px(state.target_pos);
    let _ = writeln!(
        s,
        r##"<circle cx="{tx:.1}" cy="{ty:.1}" r="{:.1}" fill="none" stroke="#3070d0" stroke-dasharray="4 3"/>"##,
        sim.scene().success_tolerance * SCALE
    );
    for (j, w) in pts.windows(2).enumerate() {
        let (x1, y1) = px(w[0]);
        let (x2, y2) = px(w[1]);
        let color = health_color(health.get(j));
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{color}" stroke-width="6" stroke-linecap="round"/>"#
        );
        let _ = writeln!(s, r##"<circle cx="{x1:.1}" cy="{y1:.1}" r="5" fill="#333"/>"##);
    }
    let (ox, oy) = px(state.object_pos);
    let _ = writeln!(s, r##"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="#d08030"/>"##, ox - 6.0, oy - 6.0);
    let _ = writeln!(
        s,
        r##"<text x="8" y="18" font-family="monospace" font-size="12" fill="#333">tick {} grip {:.2}{}</text>"##,
        state.tick,
        state.gripper,
        if sim.is_success(state) { " SUCCESS" } else { "" }
    );
    s.push_str("</svg>\n");
    s
}

/// Replays `episode` and writes `frame_00000.svg`, ... for every `every`-th
/// tick plus the final one. Returns the number of frames written.
pub fn render_episode(sim: &Sim, episode: &Episode, dir: &Path, every: usize) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let health = episode.meta.degradation.to_health_vector(sim.joints())?;
    let mut state = sim.reset(episode.meta.task_id, episode.meta.seed, &health)?;
    let every = every.max(1);
    let mut written = 0;
    let mut write = |state: &ArmState| -> Result<()> {
        let path = dir.join(format!("frame_{:05}.svg", state.tick));
        std::fs::write(&path, svg_frame(sim, state, &health)).map_err(|e| Error::io(&path, e))?;
        written += 1;
        Ok(())
    };
    write(&state)?;
    let n = episode.steps.len();
    for (i, step) in episode.steps.iter().enumerate() {
        state = sim.step(&state, &step.action, &health)?;
        if (i + 1) % every == 0 || i + 1 == n {
            write(&state)?;
        }
    }
    Ok(written)
}
