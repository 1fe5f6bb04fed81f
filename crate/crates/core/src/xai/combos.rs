use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::PredictionLog;

use super::index::{absolute_error, LogIndex};

/// Correctness of (auxiliary, main) predictions for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Combo {
    CC,
    CF,
    FC,
    FF,
}

impl Combo {
    pub const ALL: [Combo; 4] = [Combo::CC, Combo::CF, Combo::FC, Combo::FF];

    pub fn label(self) -> &'static str {
        match self {
            Combo::CC => "CC",
            Combo::CF => "CF",
            Combo::FC => "FC",
            Combo::FF => "FF",
        }
    }

    pub fn parse(s: &str) -> Option<Combo> {
        Combo::ALL.into_iter().find(|c| c.label() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// First letter from the auxiliary task, second from the main task.
pub fn combo_classify(aux_correct: bool, main_correct: bool) -> Combo {
    match (aux_correct, main_correct) {
        (true, true) => Combo::CC,
        (true, false) => Combo::CF,
        (false, true) => Combo::FC,
        (false, false) => Combo::FF,
    }
}

fn require_classification(index: &LogIndex<'_>, task: &str) -> Result<()> {
    index.require(task)?;
    if !index.is_classification(task) {
        return Err(Error::InvalidArgument(format!(
            "task `{task}` is not a classification"
        )));
    }
    Ok(())
}

/// Combination of every sample logged for both tasks at `epoch`.
pub fn combos_at(
    index: &LogIndex<'_>,
    aux: &str,
    main: &str,
    epoch: usize,
) -> BTreeMap<usize, Combo> {
    let (Some(a), Some(m)) = (index.at(aux, epoch), index.at(main, epoch)) else {
        return BTreeMap::new();
    };
    m.iter()
        .filter_map(|(id, mr)| {
            let ar = a.get(id)?;
            Some((
                *id,
                combo_classify(
                    ar.pred.class() == ar.target.class(),
                    mr.pred.class() == mr.target.class(),
                ),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComboCounts {
    pub epoch: usize,
    /// Indexed like [`Combo::ALL`].
    pub counts: [usize; 4],
}

impl ComboCounts {
    pub fn get(&self, c: Combo) -> usize {
        self.counts[c.slot()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboTimeline {
    pub aux: String,
    pub main: String,
    pub epochs: Vec<ComboCounts>,
}

impl ComboTimeline {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,CC,CF,FC,FF,total\n");
        for e in &self.epochs {
            let c = e.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                c[0],
                c[1],
                c[2],
                c[3],
                e.total()
            );
        }
        s
    }
}

pub fn combo_timeline(
    log: &PredictionLog,
    aux: &str,
    main: &str,
    ids: Option<&BTreeSet<usize>>,
) -> Result<ComboTimeline> {
    let index = LogIndex::new(log, ids);
    require_classification(&index, aux)?;
    require_classification(&index, main)?;
    let epochs = index
        .epochs
        .iter()
        .map(|&epoch| {
            let mut counts = [0usize; 4];
            for c in combos_at(&index, aux, main, epoch).values() {
                counts[c.slot()] += 1;
            }
            ComboCounts { epoch, counts }
        })
        .collect();
    Ok(ComboTimeline {
        aux: aux.into(),
        main: main.into(),
        epochs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub epoch: usize,
    /// Share of the anchor cohort in each combination, like [`Combo::ALL`].
    pub ratios: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub anchor_epoch: usize,
    pub anchor_set: Vec<Combo>,
    /// Sample ids of the cohort; empty means an empty report.
    pub cohort: Vec<usize>,
    pub rows: Vec<TransitionRow>,
}

impl TransitionReport {
    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
    }

    pub fn ratio(&self, epoch: usize, c: Combo) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| r.ratios[c.slot()])
    }

    pub fn to_csv(&self) -> String {
        let anchor: Vec<&str> = self.anchor_set.iter().map(|c| c.label()).collect();
        let mut s = String::from("anchor,epoch,CC,CF,FC,FF,cohort\n");
        for r in &self.rows {
            let x = r.ratios;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                anchor.join("+"),
                r.epoch,
                x[0],
                x[1],
                x[2],
                x[3],
                self.cohort.len()
            );
        }
        s
    }
}

/// Follows the samples whose combination at `anchor_epoch` lies in
/// `anchor_set` and reports their combination shares at every later epoch.
pub fn transition_tracking(
    log: &PredictionLog,
    aux: &str,
    main: &str,
    ids: Option<&BTreeSet<usize>>,
    anchor_epoch: usize,
    anchor_set: &[Combo],
) -> Result<TransitionReport> {
    let index = LogIndex::new(log, ids);
    require_classification(&index, aux)?;
    require_classification(&index, main)?;
    if !index.epochs.contains(&anchor_epoch) {
        return Err(Error::InvalidArgument(format!(
            "anchor epoch {anchor_epoch} is not in the log"
        )));
    }
    let cohort: Vec<usize> = combos_at(&index, aux, main, anchor_epoch)
        .into_iter()
        .filter(|(_, c)| anchor_set.contains(c))
        .map(|(id, _)| id)
        .collect();
    let mut rows = Vec::new();
    if !cohort.is_empty() {
        for &epoch in index.epochs.iter().filter(|&&e| e >= anchor_epoch) {
            let combos = combos_at(&index, aux, main, epoch);
            let mut counts = [0usize; 4];
            for id in &cohort {
                if let Some(c) = combos.get(id) {
                    counts[c.slot()] += 1;
                }
            }
            let total: usize = counts.iter().sum();
            if total > 0 {
                rows.push(TransitionRow {
                    epoch,
                    ratios: counts.map(|c| c as f64 / total as f64),
                });
            }
        }
    }
    Ok(TransitionReport {
        anchor_epoch,
        anchor_set: anchor_set.to_vec(),
        cohort,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyCounts {
    pub epoch: usize,
    /// `[combo][0 = in, 1 = out]`, combos ordered like [`Combo::ALL`].
    pub counts: [[usize; 2]; 4],
}

impl HierarchyCounts {
    pub fn get(&self, c: Combo, inside: bool) -> usize {
        self.counts[c.slot()][usize::from(!inside)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub epochs: Vec<HierarchyCounts>,
}

impl HierarchyReport {
    /// Samples violating "CC implies in" or "FC implies out", over all epochs.
    pub fn violations(&self) -> usize {
        self.epochs
            .iter()
            .map(|e| e.get(Combo::CC, false) + e.get(Combo::FC, true))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,CC-in,CC-out,CF-in,CF-out,FC-in,FC-out,FF-in,FF-out\n");
        for e in &self.epochs {
            let c = e.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, c[0][0], c[0][1], c[1][0], c[1][1], c[2][0], c[2][1], c[3][0], c[3][1]
            );
        }
        s
    }
}

/// Combination of (coarse, fine) correctness per sample, suffixed by
/// whether the predicted fine class lies under the predicted coarse class.
pub fn hierarchy_adherence(
    log: &PredictionLog,
    parent: &[usize],
    coarse: &str,
    fine: &str,
    ids: Option<&BTreeSet<usize>>,
) -> Result<HierarchyReport> {
    let index = LogIndex::new(log, ids);
    require_classification(&index, coarse)?;
    require_classification(&index, fine)?;
    let mut epochs = Vec::new();
    for &epoch in &index.epochs {
        let (Some(a), Some(m)) = (index.at(coarse, epoch), index.at(fine, epoch)) else {
            continue;
        };
        let mut counts = [[0usize; 2]; 4];
        for (id, fr) in m {
            let Some(cr) = a.get(id) else { continue };
            let pred_fine = fr.pred.class().expect("classification");
            let p = *parent.get(pred_fine).ok_or(Error::OutOfRange {
                what: "child class in parent map",
                index: pred_fine,
                bound: parent.len(),
            })?;
            if let Some(t) = fr.target.class() {
                if t >= parent.len() {
                    return Err(Error::OutOfRange {
                        what: "child class in parent map",
                        index: t,
                        bound: parent.len(),
                    });
                }
            }
            let combo = combo_classify(
                cr.pred.class() == cr.target.class(),
                fr.pred.class() == fr.target.class(),
            );
            let inside = Some(p) == cr.pred.class();
            counts[combo.slot()][usize::from(!inside)] += 1;
        }
        epochs.push(HierarchyCounts { epoch, counts });
    }
    Ok(HierarchyReport { epochs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboMetricRow {
    pub epoch: usize,
    pub combo: Combo,
    pub n: usize,
    /// Mean absolute error of the value task; absent for an empty cell.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboMetricReport {
    pub rows: Vec<ComboMetricRow>,
    /// Mean absolute error over all samples per epoch.
    pub overall: Vec<(usize, f64)>,
}

impl ComboMetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,combo,n,mae\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.epoch,
                r.combo.label(),
                r.n,
                r.mae.map_or(String::new(), |v| v.to_string())
            );
        }
        s
    }
}

/// Mean absolute error of `value_task` inside each (aux, main) combination.
pub fn metric_by_combo(
    log: &PredictionLog,
    value_task: &str,
    aux: &str,
    main: &str,
    ids: Option<&BTreeSet<usize>>,
) -> Result<ComboMetricReport> {
    let index = LogIndex::new(log, ids);
    require_classification(&index, aux)?;
    require_classification(&index, main)?;
    index.require(value_task)?;
    let mut rows = Vec::new();
    let mut overall = Vec::new();
    for &epoch in &index.epochs {
        let Some(v) = index.at(value_task, epoch) else {
            continue;
        };
        let combos = combos_at(&index, aux, main, epoch);
        let mut sums = [0.0f64; 4];
        let mut ns = [0usize; 4];
        let (mut total, mut n) = (0.0, 0usize);
        for (id, c) in &combos {
            let Some(r) = v.get(id) else { continue };
            let e = absolute_error(&r.pred, &r.target)?;
            sums[c.slot()] += e;
            ns[c.slot()] += 1;
            total += e;
            n += 1;
        }
        for c in Combo::ALL {
            let k = c.slot();
            rows.push(ComboMetricRow {
                epoch,
                combo: c,
                n: ns[k],
                mae: (ns[k] > 0).then(|| sums[k] / ns[k] as f64),
            });
        }
        if n > 0 {
            overall.push((epoch, total / n as f64));
        }
    }
    Ok(ComboMetricReport { rows, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::{LogRow, Payload};

    fn row(epoch: usize, id: usize, task: &str, pred: usize, target: usize) -> LogRow {
        LogRow {
            epoch,
            sample_id: id,
            group_id: id,
            task: task.into(),
            pred: Payload::Class {
                class: pred,
                confidence: 0.9,
            },
            target: Payload::Label(target),
        }
    }

    // Sample 0: CC, 1: CF, 2: FC, 3: FF at epoch 0; everyone CC at epoch 1.
    fn log() -> PredictionLog {
        let mut rows = Vec::new();
        for (id, (a, m)) in [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .enumerate()
        {
            rows.push(row(0, id, "aux", usize::from(!a), 0));
            rows.push(row(0, id, "main", usize::from(!m), 0));
            rows.push(row(1, id, "aux", 0, 0));
            rows.push(row(1, id, "main", 0, 0));
        }
        PredictionLog { rows }
    }

    #[test]
    fn timeline_partitions_samples() {
        let t = combo_timeline(&log(), "aux", "main", None).unwrap();
        assert_eq!(t.epochs[0].counts, [1, 1, 1, 1]);
        assert_eq!(t.epochs[1].counts, [4, 0, 0, 0]);
        for e in &t.epochs {
            assert_eq!(e.total(), 4);
        }
    }

    #[test]
    fn transition_follows_cohort() {
        let r =
            transition_tracking(&log(), "aux", "main", None, 0, &[Combo::FF, Combo::CF]).unwrap();
        assert_eq!(r.cohort, vec![1, 3]);
        assert_eq!(r.ratio(0, Combo::FF), Some(0.5));
        assert_eq!(r.ratio(1, Combo::CC), Some(1.0));
        assert!(transition_tracking(&log(), "aux", "main", None, 7, &[Combo::FF]).is_err());
    }

    #[test]
    fn hierarchy_counts_inside_and_outside() {
        // Fine classes 0,1 under coarse 0; fine 2 under coarse 1.
        let parent = [0, 0, 1];
        let rows = vec![
            row(0, 0, "coarse", 0, 0),
            row(0, 0, "fine", 1, 1),
            row(0, 1, "coarse", 0, 0),
            row(0, 1, "fine", 2, 0),
            row(0, 2, "coarse", 1, 0),
            row(0, 2, "fine", 0, 0),
        ];
        let r =
            hierarchy_adherence(&PredictionLog { rows }, &parent, "coarse", "fine", None).unwrap();
        let e = r.epochs[0];
        assert_eq!(e.get(Combo::CC, true), 1);
        assert_eq!(e.get(Combo::CF, false), 1);
        assert_eq!(e.get(Combo::FC, false), 1);
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn classification_required() {
        let mut l = log();
        l.rows.push(LogRow {
            epoch: 0,
            sample_id: 9,
            group_id: 9,
            task: "val".into(),
            pred: Payload::Values(vec![1.0]),
            target: Payload::Values(vec![1.0]),
        });
        assert!(combo_timeline(&l, "val", "main", None).is_err());
        assert!(matches!(
            combo_timeline(&l, "nope", "main", None),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn metric_by_combo_partitions_overall() {
        let mut l = log();
        for id in 0..4 {
            l.rows.push(LogRow {
                epoch: 0,
                sample_id: id,
                group_id: id,
                task: "v".into(),
                pred: Payload::Values(vec![id as f32]),
                target: Payload::Values(vec![0.0]),
            });
        }
        let r = metric_by_combo(&l, "v", "aux", "main", None).unwrap();
        let cells: Vec<_> = r.rows.iter().filter(|x| x.epoch == 0).collect();
        let n: usize = cells.iter().map(|c| c.n).sum();
        let weighted: f64 = cells
            .iter()
            .filter_map(|c| c.mae.map(|m| m * c.n as f64))
            .sum();
        assert_eq!(n, 4);
        assert!((weighted / 4.0 - r.overall[0].1).abs() < 1e-12);
        assert_eq!(
            cells.iter().find(|c| c.combo == Combo::FF).unwrap().mae,
            Some(3.0)
        );
    }
}
