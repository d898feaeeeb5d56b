mod common;

use comorbid::metrics::{self, ScoredSet};
use comorbid::numerics::Label;
use comorbid::seed;
use proptest::prelude::*;

/// Scores drawn from a few levels so ties are common, with both classes.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..6, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| {
            l.iter().any(|&x| x) && l.iter().any(|&x| !x)
        })
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 5.0).collect(), l))
}

/// Brute-force confusion counts for `score >= thr`.
fn confusion(scores: &[f64], labels: &[bool], thr: f64) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= thr, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_and_roc_area_match_pairwise((scores, labels) in scored()) {
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let want = common::pairwise_auc(&scores, &labels);
        prop_assert!((metrics::auc(&set).unwrap() - want).abs() < 1e-12);
        prop_assert!((metrics::roc(&set).unwrap().area() - want).abs() < 1e-12);
    }

    #[test]
    fn roc_points_match_brute_force((scores, labels) in scored()) {
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let p = labels.iter().filter(|&&l| l).count() as f64;
        let n = labels.len() as f64 - p;
        let curve = metrics::roc(&set).unwrap();
        prop_assert_eq!((curve.points[0].fpr, curve.points[0].tpr), (0.0, 0.0));
        let last = curve.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for pt in &curve.points[1..] {
            let (tp, fp, _) = confusion(&scores, &labels, pt.threshold);
            prop_assert_eq!(pt.tpr, tp as f64 / p);
            prop_assert_eq!(pt.fpr, fp as f64 / n);
        }
    }

    #[test]
    fn pr_and_f1_match_brute_force((scores, labels) in scored(), thr in 0.0f64..1.0) {
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        for pt in metrics::precision_recall(&set).unwrap() {
            let (tp, fp, fn_) = confusion(&scores, &labels, pt.threshold);
            prop_assert_eq!(pt.recall, tp as f64 / (tp + fn_) as f64);
            prop_assert_eq!(pt.precision, tp as f64 / (tp + fp) as f64);
        }
        let (tp, fp, fn_) = confusion(&scores, &labels, thr);
        let want = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((metrics::f1_at(&set, thr).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn tpr_readout_is_monotone_and_bounded((scores, labels) in scored(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let curve = metrics::roc(&ScoredSet::new(scores, labels).unwrap()).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (tl, th) = (metrics::tpr_at_fpr(&curve, lo), metrics::tpr_at_fpr(&curve, hi));
        prop_assert!((0.0..=1.0).contains(&tl) && tl <= th + 1e-15);
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling((scores, labels) in scored()) {
        let a = metrics::auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        let b = metrics::auc(&ScoredSet::new(squashed, labels).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_labels_are_dropped() {
    let set = ScoredSet::from_labels(
        &[0.9, 0.1, 0.5, 0.7],
        &[
            Label::Positive,
            Label::Negative,
            Label::Masked,
            Label::Negative,
        ],
    )
    .unwrap();
    assert_eq!(set.len(), 3);
    assert_eq!(metrics::auc(&set).unwrap(), 1.0);
}

#[test]
fn single_class_auc_is_an_error() {
    let set = ScoredSet::new(vec![0.1, 0.2], vec![true, true]).unwrap();
    assert!(metrics::auc(&set).is_err());
}

#[test]
fn bootstrap_is_seeded_and_paired() {
    let labels: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
    let good: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l {
                0.6 + i as f64 / 1000.0
            } else {
                0.5 - i as f64 / 1000.0
            }
        })
        .collect();
    let weak: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 60.0).collect();
    let a = ScoredSet::new(good, labels.clone()).unwrap();
    let b = ScoredSet::new(weak, labels.clone()).unwrap();
    let r1 = metrics::bootstrap_auc_diff(&a, &b, 2000, &mut seed::rng(4)).unwrap();
    let r2 = metrics::bootstrap_auc_diff(&a, &b, 2000, &mut seed::rng(4)).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.significant && r1.observed_diff > 0.0);
    let reversed = metrics::bootstrap_auc_diff(&b, &a, 2000, &mut seed::rng(4)).unwrap();
    assert!(!reversed.significant);
    let other = ScoredSet::new(vec![0.5; 60], labels.iter().map(|l| !l).collect()).unwrap();
    assert!(metrics::bootstrap_auc_diff(&a, &other, 10, &mut seed::rng(4)).is_err());
}
