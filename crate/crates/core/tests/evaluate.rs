use std::collections::BTreeMap;

use mvscan_core::cohort::View;
use mvscan_core::evaluate::{
    aggregate_scan, bootstrap_ci, calibrate_threshold, confusion_metrics, evaluate, roc_auc, roc_curve, write_roc_csv,
};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise Mann–Whitney count in exact integer halves.
fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    for &l in labels {
        n += u64::from(l == 0);
    }
    twice as f64 / (2 * p * n) as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    // coarse scores force ties
    let levels = rng.random_range(2..30) as f64;
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n).map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels).collect();
    (scores, labels)
}

#[test]
fn sweep_auc_equals_pairwise_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        assert!((roc_auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn calibration_is_optimal_over_all_midpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let pairs: Vec<(f64, u8)> = s.iter().copied().zip(l.iter().copied()).collect();
        let t = calibrate_threshold(&pairs).unwrap();
        let gap = |t: f64| {
            let c = confusion_metrics(&s, &l, t).unwrap();
            let sens = c.tp as f64 / (c.tp + c.fn_) as f64;
            let spec = c.tn as f64 / (c.tn + c.fp) as f64;
            (sens - spec).abs()
        };
        let mut distinct = s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let best = distinct.windows(2).map(|w| gap((w[0] + w[1]) / 2.0)).fold(f64::INFINITY, f64::min);
        if distinct.len() > 1 {
            assert!(gap(t) <= best + 1e-12, "threshold {t}: {} vs {best}", gap(t));
        }
    }
}

#[test]
fn bootstrap_intervals_contain_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<u8> = (0..60).map(|i| u8::from(i % 4 == 0)).collect();
    let preds: Vec<f64> = labels.iter().map(|&l| (f64::from(l) * 0.3 + rng.random_range(0.0..0.7)).min(1.0)).collect();
    let b = bootstrap_ci(&preds, &labels, 0.5, 1000, 9).unwrap();
    assert_eq!((b.iterations, b.redraws), (1000, 0));
    for i in [b.accuracy, b.sensitivity, b.specificity, b.auc] {
        assert!(i.lower <= i.estimate && i.estimate <= i.upper, "{i:?}");
    }
    assert!(b.roc_envelope.iter().all(|e| e.tpr_lower <= e.tpr_upper));
    let report = evaluate("test", &preds, &labels, 0.5, 1000, 9).unwrap();
    assert_eq!(report.bootstrap.as_ref().unwrap(), &b);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(json, serde_json::to_string(&evaluate("test", &preds, &labels, 0.5, 1000, 9).unwrap()).unwrap());
}

#[test]
fn roc_points_reach_both_corners() {
    let dir = tempfile::tempdir().unwrap();
    let pts = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
    assert_eq!((pts.last().unwrap().fpr, pts.last().unwrap().tpr), (1.0, 1.0));
    let path = dir.path().join("roc.csv");
    write_roc_csv(&path, &pts).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), pts.len() + 1);
}

proptest! {
    #[test]
    fn raising_the_threshold_is_monotone(
        preds in prop::collection::vec(0.0f64..1.0, 2..60),
        t1 in 0.0f64..1.0,
        dt in 0.0f64..0.5,
    ) {
        let labels: Vec<u8> = (0..preds.len()).map(|i| (i % 2) as u8).collect();
        let a = confusion_metrics(&preds, &labels, t1).unwrap();
        let b = confusion_metrics(&preds, &labels, t1 + dt).unwrap();
        prop_assert!(b.tp <= a.tp);
        prop_assert!(b.tn >= a.tn);
    }

    #[test]
    fn monotone_transform_keeps_auc(preds in prop::collection::vec(0.0f64..1.0, 2..80)) {
        let labels: Vec<u8> = (0..preds.len()).map(|i| (i % 3 == 0) as u8).collect();
        let t: Vec<f64> = preds.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&preds, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
    }

    #[test]
    fn ensemble_within_view_range(views in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..5), 1..4)) {
        let m: BTreeMap<View, Vec<f64>> = View::ALL.iter().copied().zip(views).collect();
        let s = aggregate_scan("x", &m, Some(1)).unwrap();
        let lo = s.per_view.values().copied().fold(f64::INFINITY, f64::min);
        let hi = s.per_view.values().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-15 <= s.ensemble && s.ensemble <= hi + 1e-15);
        prop_assert_eq!(s.missing_views.len(), 3 - m.len());
    }
}
