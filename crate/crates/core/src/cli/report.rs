use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{MetricKind, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Best,
    SecondBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub main_task: String,
    pub best_epoch: usize,
    pub values: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, Flag>,
}

/// Best-epoch test metrics of several runs side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `task.metric` columns, the union over all runs.
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn metric_of(column: &str) -> Option<MetricKind> {
    let name = column.rsplit('.').next()?;
    [
        MetricKind::R2,
        MetricKind::Mae,
        MetricKind::MicroF1,
        MetricKind::Accuracy,
        MetricKind::Iou,
    ]
    .into_iter()
    .find(|m| m.name() == name)
}

/// Run directories among `paths`: each path is a run (it holds
/// `summary.json`) or a directory whose immediate children are runs.
pub fn find_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join("summary.json").is_file() {
            runs.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join("summary.json").is_file())
            .collect();
        if children.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} holds no run (summary.json not found)",
                p.display()
            )));
        }
        children.sort();
        runs.extend(children);
    }
    if runs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one run directory".into(),
        ));
    }
    Ok(runs)
}

pub fn read_summary(run: &Path) -> Result<RunSummary> {
    let p = run.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
}

/// Builds the table and flags each column. The best value gets `Best`;
/// equal values all get it. `SecondBest` goes to the runner-up only when
/// the best is unique, so a tie at the top leaves no second-best.
pub fn build_report(runs: &[(String, RunSummary)]) -> Report {
    let columns: Vec<String> = runs
        .iter()
        .flat_map(|(_, s)| s.test.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .map(|(name, s)| ReportRow {
            run: name.clone(),
            main_task: s.main_task.clone(),
            best_epoch: s.best_epoch,
            values: s.test.clone(),
            flags: BTreeMap::new(),
        })
        .collect();
    for col in &columns {
        let higher = metric_of(col).is_none_or(|m| m.higher_is_better());
        let key = |v: f64| if higher { v } else { -v };
        let mut distinct: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.values.get(col))
            .map(|&v| key(v))
            .filter(|v| !v.is_nan())
            .collect();
        distinct.sort_by(|a, b| b.total_cmp(a));
        let Some(&top) = distinct.first() else {
            continue;
        };
        let n_top = distinct.iter().filter(|&&v| v == top).count();
        let second = if n_top == 1 {
            distinct.get(1).copied()
        } else {
            None
        };
        for r in &mut rows {
            let Some(&v) = r.values.get(col) else {
                continue;
            };
            if key(v) == top {
                r.flags.insert(col.clone(), Flag::Best);
            } else if Some(key(v)) == second {
                r.flags.insert(col.clone(), Flag::SecondBest);
            }
        }
    }
    Report { columns, rows }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,main_task,best_epoch");
        for c in &self.columns {
            let _ = write!(s, ",{c},{c}.flag");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.run, r.main_task, r.best_epoch);
            for c in &self.columns {
                let v = r.values.get(c).map_or(String::new(), |v| v.to_string());
                let f = match r.flags.get(c) {
                    Some(Flag::Best) => "best",
                    Some(Flag::SecondBest) => "second",
                    None => "",
                };
                let _ = write!(s, ",{v},{f}");
            }
            s.push('\n');
        }
        s
    }

    /// Markdown table; best in bold, second-best in italics.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| run | main | best epoch |");
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} | {} | {} |", r.run, r.main_task, r.best_epoch);
            for c in &self.columns {
                let cell = match (r.values.get(c), r.flags.get(c)) {
                    (None, _) => String::new(),
                    (Some(v), Some(Flag::Best)) => format!("**{v:.4}**"),
                    (Some(v), Some(Flag::SecondBest)) => format!("_{v:.4}_"),
                    (Some(v), None) => format!("{v:.4}"),
                };
                let _ = write!(s, " {cell} |");
            }
            s.push('\n');
        }
        s
    }
}
