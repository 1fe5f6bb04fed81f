use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::data::{SampleMeta, Split};

/// Split membership of every sample, aligned with the sample list it was
/// computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub samples: Vec<SampleMeta>,
    pub splits: Vec<Split>,
}

impl SplitAssignment {
    /// Positions of the samples in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_of(&self, sample_id: usize) -> Option<Split> {
        self.samples
            .iter()
            .position(|m| m.id == sample_id)
            .map(|i| self.splits[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,group_id,stratum,split\n");
        for (m, s) in self.samples.iter().zip(&self.splits) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.id,
                m.group,
                m.stratum,
                s.name()
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("sample_id,group_id,stratum,split") {
            return Err(Error::format("splits.csv", "unexpected header"));
        }
        let mut samples = Vec::new();
        let mut splits = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format("splits.csv", format!("line {}: `{line}`", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            samples.push(SampleMeta {
                id: num(f[0])?,
                group: num(f[1])?,
                stratum: num(f[2])?,
            });
            splits.push(Split::parse(f[3]).ok_or_else(bad)?);
        }
        Ok(SplitAssignment { samples, splits })
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`, giving
/// every positive fraction at least one item.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Assigns whole groups to train/val/test, per stratum, approximating
/// `fractions`. Deterministic for a given seed.
pub fn split_grouped_stratified(
    samples: &[SampleMeta],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut group_stratum: BTreeMap<usize, usize> = BTreeMap::new();
    for m in samples {
        let s = *group_stratum.entry(m.group).or_insert(m.stratum);
        if s != m.stratum {
            return Err(Error::Config(format!(
                "group {} spans strata {s} and {}",
                m.group, m.stratum
            )));
        }
    }
    for (&g, &s) in &group_stratum {
        strata.entry(s).or_default().push(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut group_split: BTreeMap<usize, Split> = BTreeMap::new();
    for (stratum, mut groups) in strata {
        if groups.len() < needed {
            return Err(Error::Config(format!(
                "stratum {stratum} has {} groups, fewer than the {needed} splits",
                groups.len()
            )));
        }
        groups.shuffle(&mut rng);
        let counts = apportion(groups.len(), &fractions);
        let mut it = groups.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for g in it.by_ref().take(count) {
                group_split.insert(g, split);
            }
        }
    }
    Ok(SplitAssignment {
        samples: samples.to_vec(),
        splits: samples.iter().map(|m| group_split[&m.group]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(groups: usize, per_group: usize, strata: usize) -> Vec<SampleMeta> {
        (0..groups * per_group)
            .map(|id| SampleMeta {
                id,
                group: id / per_group,
                stratum: (id / per_group) % strata,
            })
            .collect()
    }

    #[test]
    fn ten_groups_split_six_two_two() {
        let s = split_grouped_stratified(&grid(10, 3, 1), [0.6, 0.2, 0.2], 1).unwrap();
        let groups = |sp| {
            let mut g: Vec<usize> = s.indices(sp).iter().map(|&i| s.samples[i].group).collect();
            g.dedup();
            g.len()
        };
        assert_eq!(
            (
                groups(Split::Train),
                groups(Split::Val),
                groups(Split::Test)
            ),
            (6, 2, 2)
        );
    }

    #[test]
    fn deterministic_and_whole_groups() {
        let samples = grid(40, 5, 2);
        let a = split_grouped_stratified(&samples, [0.6, 0.2, 0.2], 9).unwrap();
        let b = split_grouped_stratified(&samples, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(a, b);
        for g in 0..40 {
            let splits: Vec<Split> = (0..5).map(|k| a.splits[g * 5 + k]).collect();
            assert!(splits.windows(2).all(|w| w[0] == w[1]));
        }
        assert_eq!(SplitAssignment::from_csv(&a.to_csv()).unwrap(), a);
    }

    #[test]
    fn small_stratum_rejected() {
        assert!(split_grouped_stratified(&grid(4, 1, 2), [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_grouped_stratified(&grid(10, 1, 1), [0.6, 0.2, 0.3], 0).is_err());
    }

    #[test]
    fn every_positive_fraction_gets_a_group() {
        assert_eq!(apportion(3, &[0.9, 0.05, 0.05]), [1, 1, 1]);
        assert_eq!(apportion(20, &[0.9, 0.05, 0.05]), [18, 1, 1]);
        assert_eq!(apportion(7, &[0.6, 0.2, 0.2]).iter().sum::<usize>(), 7);
    }
}
