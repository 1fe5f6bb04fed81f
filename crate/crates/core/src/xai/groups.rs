use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::multitask::{PredictionLog, Split};

use super::index::{error_value, LogIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub epoch: usize,
    pub split: Option<Split>,
    pub n: usize,
    /// Mean per-sample error of the main task.
    pub main_error: f64,
    /// Share of correct auxiliary predictions.
    pub aux_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub rows: Vec<GroupRow>,
}

impl GroupReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,epoch,split,n,main_error,aux_accuracy\n");
        for r in &self.rows {
            let split = r.split.map_or("", |s| s.name());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.group, r.epoch, split, r.n, r.main_error, r.aux_accuracy
            );
        }
        s
    }
}

/// Per-group mean main-task error and auxiliary accuracy per epoch.
/// `split_of` maps sample ids to their split.
pub fn per_group_aggregate(
    log: &PredictionLog,
    main: &str,
    aux: &str,
    ids: Option<&BTreeSet<usize>>,
    split_of: &BTreeMap<usize, Split>,
) -> Result<GroupReport> {
    let index = LogIndex::new(log, ids);
    index.require(main)?;
    index.require(aux)?;
    let mut rows = Vec::new();
    for &epoch in &index.epochs {
        let (Some(m), Some(a)) = (index.at(main, epoch), index.at(aux, epoch)) else {
            continue;
        };
        let mut acc: BTreeMap<usize, (usize, f64, f64, Option<Split>)> = BTreeMap::new();
        for (id, mr) in m {
            let Some(ar) = a.get(id) else { continue };
            let e = acc
                .entry(mr.group_id)
                .or_insert((0, 0.0, 0.0, split_of.get(id).copied()));
            e.0 += 1;
            e.1 += error_value(&mr.pred, &mr.target)?;
            e.2 += 1.0 - error_value(&ar.pred, &ar.target)?;
        }
        rows.extend(
            acc.into_iter()
                .map(|(group, (n, err, ok, split))| GroupRow {
                    group,
                    epoch,
                    split,
                    n,
                    main_error: err / n as f64,
                    aux_accuracy: ok / n as f64,
                }),
        );
    }
    Ok(GroupReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRow {
    pub epoch: usize,
    pub sample_id: usize,
    pub aux_correct: bool,
    pub main_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub rows: Vec<CorrectnessRow>,
}

impl CorrectnessReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,sample_id,aux_correct,main_error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.epoch,
                r.sample_id,
                u8::from(r.aux_correct),
                r.main_error
            );
        }
        s
    }

    /// Mean main error of the correct or incorrect sample at `epoch`.
    pub fn mean_error(&self, epoch: usize, aux_correct: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == epoch && r.aux_correct == aux_correct)
            .map(|r| r.main_error)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Main-task error of up to `cap` samples with a correct auxiliary
/// prediction and up to `cap` with a wrong one, drawn without replacement
/// at every epoch.
pub fn error_by_correctness(
    log: &PredictionLog,
    main: &str,
    aux: &str,
    ids: Option<&BTreeSet<usize>>,
    cap: usize,
    seed: u64,
) -> Result<CorrectnessReport> {
    let index = LogIndex::new(log, ids);
    index.require(main)?;
    index.require(aux)?;
    let mut rows = Vec::new();
    for &epoch in &index.epochs {
        let (Some(m), Some(a)) = (index.at(main, epoch), index.at(aux, epoch)) else {
            continue;
        };
        let mut pools: [Vec<(usize, f64)>; 2] = [Vec::new(), Vec::new()];
        for (id, mr) in m {
            let Some(ar) = a.get(id) else { continue };
            let correct = error_value(&ar.pred, &ar.target)? == 0.0;
            pools[usize::from(correct)].push((*id, error_value(&mr.pred, &mr.target)?));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
        for (correct, pool) in [(false, &pools[0]), (true, &pools[1])] {
            let mut chosen: Vec<&(usize, f64)> = pool
                .choose_multiple(&mut rng, cap.min(pool.len()))
                .collect();
            chosen.sort_by_key(|(id, _)| *id);
            rows.extend(
                chosen
                    .into_iter()
                    .map(|&(sample_id, main_error)| CorrectnessRow {
                        epoch,
                        sample_id,
                        aux_correct: correct,
                        main_error,
                    }),
            );
        }
    }
    Ok(CorrectnessReport { rows })
}
