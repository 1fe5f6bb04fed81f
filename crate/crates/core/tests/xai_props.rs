use std::collections::{BTreeMap, BTreeSet};

use modaux::multitask::{LogRow, Payload, PredictionLog, Split};
use modaux::xai::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{random_log, PARENT};

fn ids(log: &PredictionLog) -> BTreeSet<usize> {
    log.rows.iter().map(|r| r.sample_id).collect()
}

fn anchor_set(mask: u8) -> Vec<Combo> {
    Combo::ALL
        .into_iter()
        .enumerate()
        .filter(|(k, _)| mask & (1 << k) != 0)
        .map(|(_, c)| c)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn combo_counts_partition_eval_set(n in 1usize..80, epochs in 1usize..6, seed in any::<u64>()) {
        let log = random_log(n, epochs, 5, seed);
        let t = combo_timeline(&log, "aux", "main", None).unwrap();
        prop_assert_eq!(t.epochs.len(), epochs);
        for e in &t.epochs {
            prop_assert_eq!(e.total(), n);
        }
        let subset: BTreeSet<usize> = ids(&log).into_iter().step_by(2).collect();
        let t = combo_timeline(&log, "aux", "main", Some(&subset)).unwrap();
        for e in &t.epochs {
            prop_assert_eq!(e.total(), subset.len());
        }
    }

    #[test]
    fn transition_ratios_sum_to_one(
        n in 1usize..80,
        epochs in 1usize..6,
        mask in 1u8..16,
        anchor in 0usize..6,
        seed in any::<u64>(),
    ) {
        let log = random_log(n, epochs, 5, seed);
        let anchor = anchor % epochs;
        let set = anchor_set(mask);
        let r = transition_tracking(&log, "aux", "main", None, anchor, &set).unwrap();
        if r.is_empty() {
            prop_assert!(r.rows.is_empty());
        } else {
            prop_assert_eq!(r.rows.len(), epochs - anchor);
            for row in &r.rows {
                prop_assert!((row.ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let first = &r.rows[0];
            prop_assert_eq!(first.epoch, anchor);
            let inside: f64 = set.iter().map(|&c| r.ratio(anchor, c).unwrap()).sum();
            prop_assert!((inside - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn combo_means_recombine(n in 1usize..80, epochs in 1usize..5, seed in any::<u64>()) {
        let log = random_log(n, epochs, 5, seed);
        let rep = metric_by_combo(&log, "value", "aux", "main", None).unwrap();
        prop_assert_eq!(rep.overall.len(), epochs);
        for &(epoch, overall) in &rep.overall {
            let cells: Vec<_> = rep.rows.iter().filter(|r| r.epoch == epoch).collect();
            let total: usize = cells.iter().map(|r| r.n).sum();
            prop_assert_eq!(total, n);
            let weighted: f64 = cells.iter().filter_map(|r| r.mae.map(|m| m * r.n as f64)).sum::<f64>() / total as f64;
            prop_assert!((weighted - overall).abs() <= 1e-12, "{} vs {}", weighted, overall);
        }
    }

    #[test]
    fn group_means_recombine(n in 1usize..80, epochs in 1usize..5, groups in 1usize..9, seed in any::<u64>()) {
        let log = random_log(n, epochs, groups, seed);
        let split_of: BTreeMap<usize, Split> = ids(&log).into_iter().map(|id| (id, Split::Test)).collect();
        for (main, aux) in [("main", "aux"), ("value", "aux")] {
            let rep = per_group_aggregate(&log, main, aux, None, &split_of).unwrap();
            let index = LogIndex::new(&log, None);
            for epoch in 0..epochs {
                let rows: Vec<_> = rep.rows.iter().filter(|r| r.epoch == epoch).collect();
                prop_assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), n);
                prop_assert!(rows.iter().all(|r| r.split == Some(Split::Test)));
                let err: f64 = rows.iter().map(|r| r.main_error * r.n as f64).sum::<f64>() / n as f64;
                let acc: f64 = rows.iter().map(|r| r.aux_accuracy * r.n as f64).sum::<f64>() / n as f64;
                let m = index.at(main, epoch).unwrap();
                let a = index.at(aux, epoch).unwrap();
                let g_err = m.values().map(|r| error_value(&r.pred, &r.target).unwrap()).sum::<f64>() / n as f64;
                let g_acc = a.values().filter(|r| r.pred.class() == r.target.class()).count() as f64 / n as f64;
                prop_assert!((err - g_err).abs() <= 1e-12);
                prop_assert!((acc - g_acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn correctness_sampling_recombines_when_uncapped(n in 1usize..60, epochs in 1usize..4, seed in any::<u64>()) {
        let log = random_log(n, epochs, 4, seed);
        let rep = error_by_correctness(&log, "value", "aux", None, n, seed).unwrap();
        let index = LogIndex::new(&log, None);
        for epoch in 0..epochs {
            let rows: Vec<_> = rep.rows.iter().filter(|r| r.epoch == epoch).collect();
            prop_assert_eq!(rows.len(), n);
            let global = index.at("value", epoch).unwrap().values()
                .map(|r| error_value(&r.pred, &r.target).unwrap()).sum::<f64>() / n as f64;
            let parts: f64 = [true, false].into_iter().map(|c| {
                let k = rows.iter().filter(|r| r.aux_correct == c).count() as f64;
                rep.mean_error(epoch, c).map_or(0.0, |m| m * k)
            }).sum::<f64>() / n as f64;
            prop_assert!((parts - global).abs() <= 1e-12);
        }
    }

    #[test]
    fn correctness_sampling_respects_cap(n in 1usize..60, cap in 1usize..20, seed in any::<u64>()) {
        let log = random_log(n, 3, 4, seed);
        let rep = error_by_correctness(&log, "main", "aux", None, cap, seed).unwrap();
        for epoch in 0..3 {
            for c in [true, false] {
                let picked: Vec<usize> = rep.rows.iter().filter(|r| r.epoch == epoch && r.aux_correct == c).map(|r| r.sample_id).collect();
                let unique: BTreeSet<_> = picked.iter().collect();
                prop_assert!(picked.len() <= cap);
                prop_assert_eq!(unique.len(), picked.len());
            }
        }
    }

    #[test]
    fn hierarchy_rules_hold_on_consistent_targets(n in 1usize..80, epochs in 1usize..5, seed in any::<u64>()) {
        let log = random_log(n, epochs, 5, seed);
        let rep = hierarchy_adherence(&log, &PARENT, "aux", "main", None).unwrap();
        prop_assert_eq!(rep.violations(), 0);
        for e in &rep.epochs {
            prop_assert_eq!(e.counts.iter().flatten().sum::<usize>(), n);
        }
    }
}

#[test]
fn hierarchy_out_of_range_child_is_rejected() {
    let log = random_log(20, 1, 2, 4);
    let err = hierarchy_adherence(&log, &PARENT[..3], "aux", "main", None).unwrap_err();
    assert_eq!(err.code(), "E_RANGE");
}

#[test]
fn combos_need_classification_tasks() {
    let log = random_log(10, 1, 2, 4);
    assert!(combo_timeline(&log, "value", "main", None).is_err());
    assert!(combo_timeline(&log, "aux", "missing", None).is_err());
}

#[test]
fn null_pvalues_are_roughly_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 400;
    let mut below = [0usize; 3];
    for t in 0..trials {
        let x: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
        let p = pearson_pvalue(&x, &y, 400, t).unwrap();
        assert!((0.0..=1.0).contains(&p));
        for (k, alpha) in [0.05, 0.2, 0.5].into_iter().enumerate() {
            below[k] += usize::from(p < alpha);
        }
    }
    // Binomial tolerances of about four standard deviations.
    let rates = below.map(|b| b as f64 / trials as f64);
    assert!((0.01..=0.1).contains(&rates[0]), "{rates:?}");
    assert!((0.12..=0.28).contains(&rates[1]), "{rates:?}");
    assert!((0.4..=0.6).contains(&rates[2]), "{rates:?}");
}

#[test]
fn perfect_correlation_has_tiny_pvalue() {
    let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
    assert!(pearson_pvalue(&x, &x, DEFAULT_PERMUTATIONS, 0).unwrap() <= 0.001);
}

#[test]
fn correlation_report_tracks_planted_link() {
    // Main error follows aux error for half the samples in later epochs.
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for epoch in 0..3 {
        for id in 0..120 {
            let aux_ok = rng.gen_bool(0.6);
            let main_err = if aux_ok {
                rng.gen_range(0.0f32..0.5)
            } else {
                rng.gen_range(0.5f32..1.5)
            };
            rows.push(LogRow {
                epoch,
                sample_id: id,
                group_id: id / 4,
                task: "aux".into(),
                pred: Payload::Class {
                    class: usize::from(!aux_ok),
                    confidence: 0.7,
                },
                target: Payload::Label(0),
            });
            rows.push(LogRow {
                epoch,
                sample_id: id,
                group_id: id / 4,
                task: "main".into(),
                pred: Payload::Values(vec![1.0 + main_err]),
                target: Payload::Values(vec![1.0]),
            });
        }
    }
    let log = PredictionLog { rows };
    let subset: BTreeSet<usize> = eval_subset(&(0..120).collect::<Vec<_>>(), 0.5, 1)
        .unwrap()
        .into_iter()
        .collect();
    assert_eq!(subset.len(), 60);
    let rep = correlation_over_epochs(&log, "main", &["aux"], &subset, 2000, 3).unwrap();
    assert_eq!(rep.rows.len(), 3);
    for e in 0..3 {
        let row = rep.get(e, "aux").unwrap();
        assert_eq!(row.n, 60);
        assert!(row.r.unwrap() > 0.5 && row.p.unwrap() < 0.01, "{row:?}");
    }
}
