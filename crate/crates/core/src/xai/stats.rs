use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Denominator guard of [`relative_error`].
pub const REL_EPS: f64 = 1e-6;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// `|pred - target| / max(|target|, REL_EPS)`.
pub fn relative_error(pred: f64, target: f64) -> f64 {
    (pred - target).abs() / target.abs().max(REL_EPS)
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

fn prepare(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    let (xc, nx) = centered(x);
    let (yc, ny) = centered(y);
    let spread = |c: &[f64]| c.iter().any(|v| v.abs() > 0.0);
    if nx == 0.0 || !spread(&xc) {
        return Err(Error::UndefinedCorrelation(
            "first sequence is constant".into(),
        ));
    }
    if ny == 0.0 || !spread(&yc) {
        return Err(Error::UndefinedCorrelation(
            "second sequence is constant".into(),
        ));
    }
    Ok((xc, yc, nx * ny))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (xc, yc, denom) = prepare(x, y)?;
    Ok((dot(&xc, &yc) / denom).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-value of [`pearson`]: the share of seeded
/// permutations of `y` whose |r| reaches the observed |r|, counting the
/// observed arrangement once in numerator and denominator.
pub fn pearson_pvalue(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    let (xc, mut yc, denom) = prepare(x, y)?;
    let observed = (dot(&xc, &yc) / denom).abs();
    let tol = 1e-12 * observed.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..permutations {
        yc.shuffle(&mut rng);
        if (dot(&xc, &yc) / denom).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}

/// Ranks with ties given their average rank, starting at 1.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}
