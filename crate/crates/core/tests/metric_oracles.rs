//! Metrics checked against naive reference implementations.

use modaux::multitask::metrics::{accuracy, iou, mae, micro_f1, r_squared};
use modaux::multitask::normalize_weights;
use modaux::xai::pearson;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

const TOL: f64 = 1e-10;

fn assert_close(what: &str, case: usize, got: f64, want: f64, tol: f64) {
    assert!(
        (got - want).abs() <= tol,
        "{what} case {case}: {got} vs {want}"
    );
}

#[test]
fn regression_metrics_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.gen_range(2..=200);
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
        assert_close("r2", case, r_squared(&p, &t).unwrap(), ref_r2(&p, &t), TOL);
        assert_close("mae", case, mae(&p, &t).unwrap(), ref_mae(&p, &t), TOL);
        if n >= 3 {
            assert_close(
                "pearson",
                case,
                pearson(&p, &t).unwrap(),
                ref_pearson(&p, &t),
                TOL,
            );
        }
    }
}

#[test]
fn classification_metrics_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..100 {
        let n = rng.gen_range(1..=200);
        let k = rng.gen_range(2..=13);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p: Vec<usize> = t
            .iter()
            .map(|&c| {
                if rng.gen_bool(0.6) {
                    c
                } else {
                    rng.gen_range(0..k)
                }
            })
            .collect();
        assert_close(
            "micro_f1",
            case,
            micro_f1(&p, &t, k).unwrap(),
            ref_micro_f1(&p, &t, k),
            TOL,
        );
        assert_close(
            "accuracy",
            case,
            accuracy(&p, &t).unwrap(),
            ref_accuracy(&p, &t),
            TOL,
        );
    }
}

#[test]
fn iou_matches_reference_on_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let k = rng.gen_range(2..=12);
        let t: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
        let p: Vec<usize> = t
            .iter()
            .map(|&c| {
                if rng.gen_bool(0.5) {
                    c
                } else {
                    rng.gen_range(0..k)
                }
            })
            .collect();
        assert_close(
            "iou",
            case,
            iou(&p, &t, k).unwrap(),
            ref_iou(&p, &t, k),
            TOL,
        );
    }
}

#[test]
fn pearson_matches_two_pass_reference_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..100 {
        let n = rng.gen_range(3..=200);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.3 * v + rng.gen_range(0.0..1.0))
            .collect();
        assert_close(
            "pearson",
            case,
            pearson(&x, &y).unwrap(),
            ref_pearson(&x, &y),
            1e-12,
        );
    }
}

#[test]
fn appendix_weight_examples() {
    let w = normalize_weights(&[9.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(w[0], 9.0 / 13.0);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let w = normalize_weights(&[4.0, 1.0, 1.0]).unwrap();
    assert_eq!(w[0], 2.0 / 3.0);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn micro_f1_equals_accuracy(
        (k, pairs) in (2usize..10).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..150)))
    ) {
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let f1 = micro_f1(&p, &t, k).unwrap();
        let acc = accuracy(&p, &t).unwrap();
        prop_assert!((f1 - acc).abs() < 1e-12, "{} vs {}", f1, acc);
    }

    #[test]
    fn normalized_weights_sum_to_one_and_keep_ratios(raw in prop::collection::vec(1e-3f64..100.0, 1..8)) {
        let w = normalize_weights(&raw).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 1..raw.len() {
            let want = raw[i] / raw[0];
            prop_assert!((w[i] / w[0] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}
