use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::multitask::{PredictionLog, Split, SplitAssignment};
use crate::synthdata::read_ledger;
use crate::xai::{self, Combo};

use super::config::{DatasetSource, ExperimentConfig};
use super::report::read_summary;
use super::{AnalysisKind, AnalyzeArgs, RESOLVED_CONFIG};

/// Everything an analysis reads from a run directory.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub log: PredictionLog,
    pub split: SplitAssignment,
    pub main_task: String,
    pub best_epoch: usize,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let log = PredictionLog::from_csv(&read("predictions.csv")?)
            .map_err(|e| relocate(e, &dir.join("predictions.csv")))?;
        let split = SplitAssignment::from_csv(&read("splits.csv")?)
            .map_err(|e| relocate(e, &dir.join("splits.csv")))?;
        let summary = read_summary(dir)?;
        Ok(RunArtifacts {
            dir: dir.to_path_buf(),
            log,
            split,
            main_task: summary.main_task,
            best_epoch: summary.best_epoch,
        })
    }

    /// Sample ids of `split`, or every logged id for `None`.
    pub fn ids(&self, split: Option<Split>) -> BTreeSet<usize> {
        match split {
            Some(s) => self
                .split
                .indices(s)
                .into_iter()
                .map(|i| self.split.samples[i].id)
                .collect(),
            None => self.log.rows.iter().map(|r| r.sample_id).collect(),
        }
    }
}

fn relocate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { detail, .. } => Error::format(path, detail),
        other => other,
    }
}

fn write_report<R: Serialize>(
    dir: &Path,
    stem: &str,
    csv: String,
    report: &R,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(report)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(vec![csv_path, json_path])
}

fn required<'a>(v: Option<&'a String>, flag: &str) -> Result<&'a str> {
    v.map(String::as_str)
        .ok_or_else(|| Error::InvalidArgument(format!("this analysis needs --{flag}")))
}

/// Parent map from a file: a JSON array or integers separated by commas
/// or whitespace, entry `i` being the parent of fine class `i`.
pub fn read_parent_map(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| Error::format(path, e.to_string()));
    }
    trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::format(path, format!("`{s}` is not a class index")))
        })
        .collect()
}

/// Parent map taken from the tree dataset the run was trained on.
fn parent_from_dataset(run: &Path, coarse: &str, fine: &str) -> Result<Vec<usize>> {
    let cfg = ExperimentConfig::load(&run.join(RESOLVED_CONFIG))?;
    let DatasetSource::Path { path } = cfg.dataset else {
        return Err(Error::Config(
            "run config does not record its dataset; pass --parent".into(),
        ));
    };
    let ledger = read_ledger(&path)?;
    let map = |key: &str| -> Result<Vec<usize>> {
        serde_json::from_value(ledger["params"][key].clone())
            .map_err(|_| Error::format(path.join("ledger.json"), format!("no `{key}` parent map")))
    };
    match (coarse, fine) {
        ("l2", "l3") => map("parent_32"),
        ("l1", "l2") => map("parent_21"),
        ("l1", "l3") => {
            let (p32, p21) = (map("parent_32")?, map("parent_21")?);
            p32.iter()
                .map(|&p| {
                    p21.get(p).copied().ok_or(Error::OutOfRange {
                        what: "parent map",
                        index: p,
                        bound: p21.len(),
                    })
                })
                .collect()
        }
        _ => Err(Error::InvalidArgument(format!(
            "no known hierarchy from `{fine}` to `{coarse}`; pass --parent"
        ))),
    }
}

/// Runs one analysis and returns the files it wrote.
pub fn run_analysis(args: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let run = RunArtifacts::load(&args.run)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join("analysis"));
    let split = match args.split.as_str() {
        "all" => None,
        s => Some(
            Split::parse(s)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))?,
        ),
    };
    let ids = run.ids(split);
    let main = args.main.clone().unwrap_or_else(|| run.main_task.clone());
    let seed = args.seed.unwrap_or(0);
    match args.kind {
        AnalysisKind::Correlation => {
            let aux: Vec<&str> = if args.aux.is_empty() {
                let tasks: BTreeSet<&str> = run
                    .log
                    .rows
                    .iter()
                    .map(|r| r.task.as_str())
                    .filter(|t| *t != main)
                    .collect();
                tasks.into_iter().collect()
            } else {
                args.aux.iter().map(String::as_str).collect()
            };
            let pool: Vec<usize> = ids.into_iter().collect();
            let subset: BTreeSet<usize> = xai::eval_subset(&pool, args.subset, seed)?
                .into_iter()
                .collect();
            let r = xai::correlation_over_epochs(
                &run.log,
                &main,
                &aux,
                &subset,
                args.permutations,
                seed,
            )?;
            write_report(&out, "correlation", r.to_csv(), &r)
        }
        AnalysisKind::Combos => {
            let aux = required(args.aux.first(), "aux")?;
            let t = xai::combo_timeline(&run.log, aux, &main, Some(&ids))?;
            let mut files = write_report(&out, "combo_timeline", t.to_csv(), &t)?;
            if let Some(anchor) = args.anchor_epoch {
                let set = parse_combos(&args.anchor_set)?;
                let r = xai::transition_tracking(&run.log, aux, &main, Some(&ids), anchor, &set)?;
                files.extend(write_report(&out, "transitions", r.to_csv(), &r)?);
            }
            Ok(files)
        }
        AnalysisKind::Hierarchy => {
            let coarse = required(args.coarse.as_ref(), "coarse")?;
            let fine = args.fine.as_deref().unwrap_or(&main);
            let parent = match &args.parent {
                Some(p) => read_parent_map(p)?,
                None => parent_from_dataset(&run.dir, coarse, fine)?,
            };
            let r = xai::hierarchy_adherence(&run.log, &parent, coarse, fine, Some(&ids))?;
            write_report(&out, "hierarchy", r.to_csv(), &r)
        }
        AnalysisKind::ByCombo => {
            let aux = required(args.aux.first(), "aux")?;
            let value = required(args.value.as_ref(), "value")?;
            let r = xai::metric_by_combo(&run.log, value, aux, &main, Some(&ids))?;
            write_report(&out, "combo_metric", r.to_csv(), &r)
        }
        AnalysisKind::Groups => {
            let aux = required(args.aux.first(), "aux")?;
            let split_of: BTreeMap<usize, Split> = run
                .split
                .samples
                .iter()
                .zip(&run.split.splits)
                .map(|(m, s)| (m.id, *s))
                .collect();
            let r = xai::per_group_aggregate(&run.log, &main, aux, Some(&ids), &split_of)?;
            write_report(&out, "groups", r.to_csv(), &r)
        }
        AnalysisKind::Correctness => {
            let aux = required(args.aux.first(), "aux")?;
            let r = xai::error_by_correctness(&run.log, &main, aux, Some(&ids), args.cap, seed)?;
            write_report(&out, "correctness", r.to_csv(), &r)
        }
        AnalysisKind::Maps => {
            let sample = args
                .sample
                .ok_or_else(|| Error::InvalidArgument("this analysis needs --sample".into()))?;
            let epoch = args.epoch.unwrap_or(run.best_epoch);
            let dir = out.join(format!("maps/sample_{sample}_epoch_{epoch}"));
            let b = xai::error_map_export(&run.log, sample, epoch, &dir)?;
            let mut files: Vec<PathBuf> = b
                .maps
                .iter()
                .flat_map(|m| m.files.iter().map(|f| dir.join(f)))
                .collect();
            files.push(dir.join("legend.json"));
            Ok(files)
        }
    }
}

fn parse_combos(list: &str) -> Result<Vec<Combo>> {
    list.split(',')
        .map(|s| {
            Combo::parse(s.trim())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown combination `{s}`")))
        })
        .collect()
}
