//! Naive metric references and a random prediction-log generator shared
//! by several test targets.

#![allow(dead_code)]

use modaux::multitask::{LogRow, Payload, PredictionLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn confusion(pred: &[usize], target: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for i in 0..pred.len() {
        m[target[i]][pred[i]] += 1;
    }
    m
}

pub fn ref_r2(p: &[f64], t: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in 0..t.len() {
        res += (t[i] - p[i]) * (t[i] - p[i]);
        tot += (t[i] - mean) * (t[i] - mean);
    }
    1.0 - res / tot
}

pub fn ref_mae(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += if p[i] > t[i] {
            p[i] - t[i]
        } else {
            t[i] - p[i]
        };
    }
    s / p.len() as f64
}

pub fn ref_micro_f1(p: &[usize], t: &[usize], k: usize) -> f64 {
    let m = confusion(p, t, k);
    let tp: usize = (0..k).map(|c| m[c][c]).sum();
    let fp: usize = (0..k)
        .map(|c| (0..k).filter(|&r| r != c).map(|r| m[r][c]).sum::<usize>())
        .sum();
    let fneg: usize = (0..k)
        .map(|c| (0..k).filter(|&q| q != c).map(|q| m[c][q]).sum::<usize>())
        .sum();
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn ref_accuracy(p: &[usize], t: &[usize]) -> f64 {
    let m = confusion(p, t, p.iter().chain(t).max().unwrap() + 1);
    (0..m.len()).map(|c| m[c][c]).sum::<usize>() as f64 / p.len() as f64
}

pub fn ref_iou(p: &[usize], t: &[usize], k: usize) -> f64 {
    let m = confusion(p, t, k);
    let mut scores = Vec::new();
    for c in 0..k {
        let inter = m[c][c];
        let row: usize = m[c].iter().sum();
        let col: usize = (0..k).map(|r| m[r][c]).sum();
        let union = row + col - inter;
        if union > 0 {
            scores.push(inter as f64 / union as f64);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn ref_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub const PARENT: [usize; 6] = [0, 0, 1, 1, 2, 2];

/// Random log over `n` samples and `epochs` epochs with a coarse task
/// `aux`, a fine task `main` consistent with [`PARENT`] in its targets, and
/// a scalar task `value`.
pub fn random_log(n: usize, epochs: usize, groups: usize, seed: u64) -> PredictionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine_t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..PARENT.len())).collect();
    let value_t: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let group: Vec<usize> = (0..n).map(|_| rng.gen_range(0..groups)).collect();
    let mut rows = Vec::new();
    for epoch in 0..epochs {
        let hit = 0.3 + 0.6 * epoch as f64 / epochs as f64;
        for i in 0..n {
            let id = 3 * i + 11;
            let fine = if rng.gen_bool(hit) {
                fine_t[i]
            } else {
                rng.gen_range(0..PARENT.len())
            };
            let coarse = if rng.gen_bool(hit) {
                PARENT[fine_t[i]]
            } else {
                rng.gen_range(0..3)
            };
            let mut push = |task: &str, pred: Payload, target: Payload| {
                rows.push(LogRow {
                    epoch,
                    sample_id: id,
                    group_id: group[i],
                    task: task.into(),
                    pred,
                    target,
                })
            };
            let class = |c| Payload::Class {
                class: c,
                confidence: 0.5,
            };
            push("aux", class(coarse), Payload::Label(PARENT[fine_t[i]]));
            push("main", class(fine), Payload::Label(fine_t[i]));
            push(
                "value",
                Payload::Values(vec![value_t[i] + rng.gen_range(-1.0f32..1.0)]),
                Payload::Values(vec![value_t[i]]),
            );
        }
    }
    PredictionLog { rows }
}
