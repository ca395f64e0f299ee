//! Episode records and their JSON-lines persistence.
//!
//! File layout, one JSON object per line:
//!
//! ```text
//! {"kind":"header","format_version":1,"action_dim":4,"joints":4,"tasks":4}
//! {"kind":"episode","task_id":0,"seed":7,"degradation":{...},"success":true,"source":"expert","steps":N}
//! {"kind":"step",...}            (N lines)
//! {"kind":"episode",...}
//! ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::health::{DegradationConfig, HealthVector};
use crate::sim::{Action, Observation, Sim};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: Action,
    pub proprio: [f64; 4],
    pub health: HealthVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeSource {
    Expert,
    Teleop,
    PolicyRollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task_id: usize,
    /// Seed passed to `Sim::reset`.
    pub seed: u64,
    pub degradation: DegradationConfig,
    pub success: bool,
    pub source: EpisodeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Re-simulates the recorded actions from the recorded reset and reports
    /// whether the final state is a success.
    pub fn replay(&self, sim: &Sim) -> Result<bool> {
        let health = self.meta.degradation.to_health_vector(sim.joints())?;
        let mut state = sim.reset(self.meta.task_id, self.meta.seed, &health)?;
        for step in &self.steps {
            state = sim.step(&state, &step.action, &health)?;
        }
        Ok(sim.is_success(&state))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub action_dim: usize,
    pub joints: usize,
    pub tasks: usize,
}

enum Line {
    Header(DatasetHeader),
    Episode { meta: EpisodeMeta, steps: usize },
    Step(StepRecord),
}

/// Dispatches on `kind` by hand: serde's tagged-enum buffering turns the
/// integer keys of a degradation map into strings.
fn parse_line(line: &str) -> std::result::Result<Line, String> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("record is not a JSON object")?;
    let kind = obj.remove("kind").ok_or("record has no kind")?;
    let rec = match kind.as_str() {
        Some("header") => serde_json::from_value(v).map(Line::Header),
        Some("episode") => {
            let steps = obj
                .remove("steps")
                .and_then(|s| s.as_u64())
                .ok_or("episode record needs an integer steps field")?;
            serde_json::from_value(v).map(|meta| Line::Episode {
                meta,
                steps: steps as usize,
            })
        }
        Some("step") => serde_json::from_value(v).map(Line::Step),
        _ => return Err(format!("unknown record kind {kind}")),
    };
    rec.map_err(|e| e.to_string())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LineRef<'a> {
    Header(&'a DatasetHeader),
    Episode {
        #[serde(flatten)]
        meta: &'a EpisodeMeta,
        steps: usize,
    },
    Step(&'a StepRecord),
}

/// Writes `episodes` as JSON lines. Floats are written in shortest
/// round-trip form, so `load(save(x)) == x`.
pub fn save(episodes: &[Episode], path: &Path, joints: usize, tasks: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        action_dim: Action::DIM,
        joints,
        tasks,
    };
    serde_json::to_writer(&mut w, &LineRef::Header(&header))?;
    w.write_all(b"\n").map_err(io)?;
    for ep in episodes {
        serde_json::to_writer(
            &mut w,
            &LineRef::Episode {
                meta: &ep.meta,
                steps: ep.steps.len(),
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
        for step in &ep.steps {
            serde_json::to_writer(&mut w, &LineRef::Step(step))?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`save`]. Errors carry the 1-based line number.
pub fn load(path: &Path) -> Result<(DatasetHeader, Vec<Episode>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<DatasetHeader> = None;
    let mut episodes: Vec<Episode> = Vec::new();
    let mut pending = 0usize;
    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line).map_err(|e| parse_err(lineno, e))?;
        match rec {
            Line::Header(h) => {
                if header.is_some() || lineno != 1 {
                    return Err(parse_err(lineno, "unexpected header record".into()));
                }
                if h.format_version != FORMAT_VERSION {
                    return Err(parse_err(
                        lineno,
                        format!("unsupported format_version {}", h.format_version),
                    ));
                }
                header = Some(h);
            }
            _ if header.is_none() => {
                return Err(parse_err(lineno, "missing header record".into()));
            }
            Line::Episode { meta, steps } => {
                if pending != 0 {
                    return Err(parse_err(
                        lineno,
                        format!("previous episode is missing {pending} step records"),
                    ));
                }
                if steps == 0 {
                    return Err(parse_err(lineno, "episode with zero steps".into()));
                }
                pending = steps;
                episodes.push(Episode {
                    meta,
                    steps: Vec::with_capacity(steps),
                });
            }
            Line::Step(step) => {
                if pending == 0 {
                    return Err(parse_err(lineno, "step record outside an episode".into()));
                }
                let ep = episodes.last_mut().expect("pending implies an episode");
                if let Some(first) = ep.steps.first() {
                    if first.health != step.health {
                        return Err(parse_err(lineno, "health changes within an episode".into()));
                    }
                }
                ep.steps.push(step);
                pending -= 1;
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "empty file: missing header".into()))?;
    if pending != 0 {
        return Err(parse_err(
            last_line,
            format!("file truncated: last episode is missing {pending} step records"),
        ));
    }
    Ok((header, episodes))
}

/// Loads every `*.jsonl` file under `dir` (sorted by name), or `dir` itself if it is a file.
pub fn load_dir(dir: &Path) -> Result<Vec<Episode>> {
    if dir.is_file() {
        return Ok(load(dir)?.1);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load(&f)?.1);
    }
    Ok(out)
}

/// Total number of steps.
pub fn total_steps(episodes: &[Episode]) -> usize {
    episodes.iter().map(Episode::len).sum()
}
