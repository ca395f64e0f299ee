//! CSV and Markdown renderings of evaluation matrices.

use crate::eval::{EvalMatrix, Tally};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            _ => Err(crate::Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// Percentage with one decimal: 3/10 -> "30.0".
pub fn pct(t: &Tally) -> String {
    if t.episodes == 0 {
        return String::new();
    }
    format!("{:.1}", t.successes as f64 * 100.0 / t.episodes as f64)
}

fn pct_rate(rate: f64) -> String {
    format!("{:.1}", rate * 100.0)
}

fn level_label(w: f64) -> String {
    format!("w={w}")
}

fn render(header: &[String], rows: &[Vec<String>], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
            w.write_record(header).expect("in-memory csv");
            for r in rows {
                w.write_record(r).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
        }
        Format::Markdown => {
            let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
            let mut out = line(header);
            out += &line(&vec!["---".to_string(); header.len()]);
            for r in rows {
                out += &line(r);
            }
            out
        }
    }
}

/// One row per joint: `joint, w=..., Avg`, then a `healthy` row when the
/// healthy cell was evaluated.
pub fn render_matrix(m: &EvalMatrix, format: Format) -> String {
    let mut header = vec!["joint".to_string()];
    header.extend(m.levels.iter().map(|&w| level_label(w)));
    header.push("Avg".into());
    let mut rows = Vec::new();
    for (row, &j) in m.joints.iter().enumerate() {
        let mut r = vec![format!("J{j}")];
        r.extend(m.cells[row].iter().map(|c| pct(&c.total)));
        r.push(pct_rate(m.joint_average(row)));
        rows.push(r);
    }
    if m.healthy.total.episodes > 0 {
        let mut r = vec!["healthy".to_string()];
        r.extend(m.levels.iter().map(|_| String::new()));
        r.push(pct(&m.healthy.total));
        rows.push(r);
    }
    render(&header, &rows, format)
}

/// Baseline against a second model over the same grid.
///
/// CSV is long-form: `joint, level, baseline, ours, delta, >`, where `>` marks
/// cells the second model wins. Markdown mirrors the two-rows-per-joint table
/// with winning cells in bold.
pub fn render_comparison(base: &EvalMatrix, ours: &EvalMatrix, format: Format) -> String {
    let same_grid = base.joints == ours.joints && base.levels == ours.levels;
    assert!(same_grid, "comparison needs matrices over the same grid");
    match format {
        Format::Csv => {
            let header: Vec<String> = ["joint", "level", "baseline", "ours", "delta", ">"]
                .map(String::from)
                .to_vec();
            let mut rows = Vec::new();
            let mut push = |joint: String, level: String, b: &Tally, o: &Tally| {
                let delta = (o.rate() - b.rate()) * 100.0;
                rows.push(vec![
                    joint,
                    level,
                    pct(b),
                    pct(o),
                    format!("{delta:+.1}"),
                    if o.rate() > b.rate() { ">".into() } else { String::new() },
                ]);
            };
            push("healthy".into(), String::new(), &base.healthy.total, &ours.healthy.total);
            for (row, &j) in base.joints.iter().enumerate() {
                for (l, &w) in base.levels.iter().enumerate() {
                    push(
                        format!("J{j}"),
                        w.to_string(),
                        &base.cells[row][l].total,
                        &ours.cells[row][l].total,
                    );
                }
            }
            render(&header, &rows, format)
        }
        Format::Markdown => {
            let mut header = vec!["joint".to_string(), "model".to_string()];
            header.extend(base.levels.iter().map(|&w| level_label(w)));
            header.push("Avg".into());
            let mut rows = Vec::new();
            for (row, &j) in base.joints.iter().enumerate() {
                let mut b = vec![format!("J{j}"), "Baseline".to_string()];
                let mut o = vec![String::new(), "Ours".to_string()];
                for l in 0..base.levels.len() {
                    let (bt, ot) = (&base.cells[row][l].total, &ours.cells[row][l].total);
                    b.push(pct(bt));
                    o.push(bold_if(pct(ot), ot.rate() > bt.rate()));
                }
                let (ba, oa) = (base.joint_average(row), ours.joint_average(row));
                b.push(pct_rate(ba));
                o.push(bold_if(pct_rate(oa), oa > ba));
                rows.push(b);
                rows.push(o);
            }
            let mut h = vec!["healthy".to_string(), "Baseline".to_string()];
            h.extend(base.levels.iter().map(|_| String::new()));
            h.push(pct(&base.healthy.total));
            let mut ho = vec![String::new(), "Ours".to_string()];
            ho.extend(base.levels.iter().map(|_| String::new()));
            ho.push(pct(&ours.healthy.total));
            rows.push(h);
            rows.push(ho);
            render(&header, &rows, format)
        }
    }
}

fn bold_if(s: String, cond: bool) -> String {
    if cond {
        format!("**{s}**")
    } else {
        s
    }
}

/// Per-task rates: one row per `(task, model)`, columns `H` then every
/// `J<j> w=<level>` cell.
pub fn render_per_task(models: &[(&str, &EvalMatrix)], format: Format) -> String {
    let Some((_, first)) = models.first() else {
        return render(&["task".into(), "model".into(), "H".into()], &[], format);
    };
    let mut header = vec!["task".to_string(), "model".to_string(), "H".to_string()];
    for &j in &first.joints {
        for &w in &first.levels {
            header.push(format!("J{j} {}", level_label(w)));
        }
    }
    let mut rows = Vec::new();
    for (slot, &task) in first.tasks.iter().enumerate() {
        for (name, m) in models {
            let mut r = vec![format!("T{task}"), name.to_string(), pct(&m.healthy.per_task[slot].1)];
            for row in &m.cells {
                for cell in row {
                    r.push(pct(&cell.per_task[slot].1));
                }
            }
            rows.push(r);
        }
    }
    render(&header, &rows, format)
}
