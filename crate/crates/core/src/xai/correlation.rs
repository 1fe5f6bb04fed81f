use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::PredictionLog;

use super::index::{error_value, LogIndex};
use super::stats::{pearson, pearson_pvalue};

/// Share of the test set used for correlation by default.
pub const DEFAULT_SUBSET: f64 = 0.1;

/// Seeded sorted subset of `ids` holding `ceil(fraction * n)` of them.
pub fn eval_subset(ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    let k = ((ids.len() as f64 * fraction).ceil() as usize).min(ids.len());
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = v[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub epoch: usize,
    pub main: String,
    pub aux: String,
    pub n: usize,
    /// Absent when the correlation is undefined.
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationReport {
    pub fn get(&self, epoch: usize, aux: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.aux == aux)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,main,aux,n,r,p,note\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.main,
                r.aux,
                r.n,
                opt(r.r),
                opt(r.p),
                r.note.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

/// Per-epoch Pearson correlation (with permutation p-value) between the
/// per-sample error of `main` and of each auxiliary task, over `ids`.
/// An undefined correlation becomes a row without `r`, not an error.
pub fn correlation_over_epochs(
    log: &PredictionLog,
    main: &str,
    aux: &[&str],
    ids: &BTreeSet<usize>,
    permutations: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let index = LogIndex::new(log, Some(ids));
    index.require(main)?;
    for a in aux {
        index.require(a)?;
    }
    let mut rows = Vec::new();
    for &epoch in &index.epochs {
        let Some(m) = index.at(main, epoch) else {
            continue;
        };
        for &a in aux {
            let Some(x) = index.at(a, epoch) else {
                continue;
            };
            let mut me = Vec::new();
            let mut ae = Vec::new();
            for (id, mr) in m {
                if let Some(ar) = x.get(id) {
                    me.push(error_value(&mr.pred, &mr.target)?);
                    ae.push(error_value(&ar.pred, &ar.target)?);
                }
            }
            let (r, p, note) = match pearson(&me, &ae) {
                Ok(r) => (
                    Some(r),
                    Some(pearson_pvalue(&me, &ae, permutations, seed)?),
                    None,
                ),
                Err(e @ (Error::UndefinedCorrelation(_) | Error::InvalidArgument(_))) => {
                    (None, None, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            rows.push(CorrelationRow {
                epoch,
                main: main.to_string(),
                aux: a.to_string(),
                n: me.len(),
                r,
                p,
                note,
            });
        }
    }
    Ok(CorrelationReport { rows })
}
