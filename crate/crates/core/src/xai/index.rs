use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::multitask::{LogRow, Payload, PredictionLog};

use super::stats::relative_error;

/// Log rows keyed by `(task, epoch)` then sample id, restricted to an
/// optional set of sample ids.
#[derive(Debug)]
pub struct LogIndex<'a> {
    rows: BTreeMap<(String, usize), BTreeMap<usize, &'a LogRow>>,
    pub epochs: Vec<usize>,
}

impl<'a> LogIndex<'a> {
    pub fn new(log: &'a PredictionLog, ids: Option<&BTreeSet<usize>>) -> Self {
        let mut rows: BTreeMap<(String, usize), BTreeMap<usize, &LogRow>> = BTreeMap::new();
        let mut epochs = BTreeSet::new();
        for r in &log.rows {
            if ids.is_none_or(|s| s.contains(&r.sample_id)) {
                rows.entry((r.task.clone(), r.epoch))
                    .or_default()
                    .insert(r.sample_id, r);
                epochs.insert(r.epoch);
            }
        }
        LogIndex {
            rows,
            epochs: epochs.into_iter().collect(),
        }
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.rows.keys().any(|(t, _)| *t == task)
    }

    pub fn require(&self, task: &str) -> Result<()> {
        if self.has_task(task) {
            Ok(())
        } else {
            Err(Error::UnknownTask(format!(
                "`{task}` is not in the prediction log"
            )))
        }
    }

    /// Rows of `task` at `epoch`, by sample id.
    pub fn at(&self, task: &str, epoch: usize) -> Option<&BTreeMap<usize, &'a LogRow>> {
        self.rows.get(&(task.to_string(), epoch))
    }

    /// Whether every row of `task` is a classification.
    pub fn is_classification(&self, task: &str) -> bool {
        self.rows
            .iter()
            .filter(|((t, _), _)| *t == task)
            .flat_map(|(_, m)| m.values())
            .all(|r| r.pred.class().is_some() && r.target.class().is_some())
    }
}

/// Scalar per-sample error: 0/1 for classes, mean relative error for
/// values, misclassification rate for class maps, mean absolute error for
/// value maps.
pub fn error_value(pred: &Payload, target: &Payload) -> Result<f64> {
    let mismatch =
        || Error::InvalidArgument(format!("payload kinds differ: {pred:?} vs {target:?}"));
    Ok(match (pred, target) {
        (p, t) if p.class().is_some() && t.class().is_some() => {
            f64::from(u8::from(p.class() != t.class()))
        }
        (Payload::Values(p), Payload::Values(t)) if p.len() == t.len() && !p.is_empty() => {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| relative_error(a as f64, b as f64))
                .sum::<f64>()
                / p.len() as f64
        }
        (Payload::ClassMap { classes: p, .. }, Payload::ClassMap { classes: t, .. })
            if p.len() == t.len() && !p.is_empty() =>
        {
            p.iter().zip(t).filter(|(a, b)| a != b).count() as f64 / p.len() as f64
        }
        (Payload::ValueMap { values: p, .. }, Payload::ValueMap { values: t, .. })
            if p.len() == t.len() && !p.is_empty() =>
        {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / p.len() as f64
        }
        _ => return Err(mismatch()),
    })
}

/// Mean absolute error of a value payload pair.
pub fn absolute_error(pred: &Payload, target: &Payload) -> Result<f64> {
    match (pred, target) {
        (Payload::Values(p), Payload::Values(t))
        | (Payload::ValueMap { values: p, .. }, Payload::ValueMap { values: t, .. })
            if p.len() == t.len() && !p.is_empty() =>
        {
            Ok(p.iter()
                .zip(t)
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / p.len() as f64)
        }
        _ => Err(Error::InvalidArgument(
            "absolute error needs value payloads".into(),
        )),
    }
}

/// One scalar error per (epoch, sample, task).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub epoch: usize,
    pub sample_id: usize,
    pub error: f64,
}

pub fn error_records(index: &LogIndex<'_>, task: &str) -> Result<Vec<ErrorRecord>> {
    index.require(task)?;
    let mut out = Vec::new();
    for &epoch in &index.epochs {
        if let Some(rows) = index.at(task, epoch) {
            for (&sample_id, r) in rows {
                out.push(ErrorRecord {
                    epoch,
                    sample_id,
                    error: error_value(&r.pred, &r.target)?,
                });
            }
        }
    }
    Ok(out)
}
