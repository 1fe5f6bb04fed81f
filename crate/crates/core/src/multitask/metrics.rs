//! Evaluation metrics over flat prediction/target sequences.

use crate::error::{Error, Result};

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

fn check_classes(values: &[usize], k: usize) -> Result<()> {
    match values.iter().find(|&&c| c >= k) {
        Some(&bad) => Err(Error::OutOfRange {
            what: "class index",
            index: bad,
            bound: k,
        }),
        None => Ok(()),
    }
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("r_squared", pred.len(), target.len())?;
    if target.len() < 2 {
        return Err(Error::InvalidArgument(
            "r_squared needs at least two samples".into(),
        ));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "r_squared of a constant target".into(),
        ));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mae", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mae of empty input".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Micro-averaged F1 from pooled per-class TP/FP/FN.
pub fn micro_f1(pred: &[usize], target: &[usize], k: usize) -> Result<f64> {
    same_len("micro_f1", pred.len(), target.len())?;
    check_classes(pred, k)?;
    check_classes(target, k)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("micro_f1 of empty input".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for c in 0..k {
        for (&p, &t) in pred.iter().zip(target) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    same_len("accuracy", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of empty input".into()));
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean intersection-over-union over the classes with nonzero union.
pub fn iou(pred: &[usize], target: &[usize], k: usize) -> Result<f64> {
    same_len("iou", pred.len(), target.len())?;
    check_classes(pred, k)?;
    check_classes(target, k)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("iou of empty maps".into()));
    }
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(target) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let (sum, n) = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .fold((0.0, 0usize), |(s, n), (&i, &u)| {
            (s + i as f64 / u as f64, n + 1)
        });
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_relative_eq!(
            r_squared(&[1.5, 2.0, 2.5], &[1.0, 2.0, 3.0]).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert!(r_squared(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mae(&[2.0], &[5.0]).unwrap(), 3.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(micro_f1(&[1, 2, 0], &[0, 1, 2], 3).unwrap(), 0.0);
        assert_eq!(micro_f1(&[0, 1, 2, 0], &[0, 1, 2, 2], 3).unwrap(), 0.75);
        assert!(micro_f1(&[3], &[0], 3).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_relative_eq!(
            iou(&[0, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap(),
            7.0 / 12.0,
            epsilon = 1e-15
        );
        assert_eq!(iou(&[0, 0], &[1, 1], 2).unwrap(), 0.0);
        assert!(iou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }
}
