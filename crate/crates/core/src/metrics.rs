//! ROC and precision-recall evaluation and the paired bootstrap test of
//! AUC differences.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Label;
use crate::seed;

/// Default operating point for the TPR readout.
pub const DEFAULT_TARGET_FPR: f64 = 0.1;
pub const DEFAULT_F1_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RESAMPLES: usize = 5000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Redraw budget for a single bootstrap resample that lands on one class.
pub const MAX_REDRAWS: usize = 1000;

/// Scores and binary labels of the users labeled for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(
                "ScoredSet",
                format!("{} labels", scores.len()),
                format!("{}", labels.len()),
            ));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "scores".into(),
            });
        }
        Ok(ScoredSet { scores, labels })
    }

    /// Keeps only users whose label is observed.
    pub fn from_labels(scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(
                "ScoredSet",
                format!("{} labels", scores.len()),
                format!("{}", labels.len()),
            ));
        }
        let (s, l) = scores
            .iter()
            .zip(labels)
            .filter_map(|(&s, l)| l.target().map(|y| (s, y == 1.0)))
            .unzip();
        ScoredSet::new(s, l)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self) -> Result<()> {
        let p = self.positives();
        if p == 0 || p == self.len() {
            return Err(Error::DegenerateLabels(format!(
                "{p} positives and {} negatives; ROC needs both",
                self.len() - p
            )));
        }
        Ok(())
    }

    /// Indices ordered by descending score.
    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(Ordering::Equal)
        });
        idx
    }

    /// Runs of equal score in `order`, as half-open ranges.
    fn groups<'a>(
        &'a self,
        order: &'a [usize],
    ) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
        let mut start = 0;
        std::iter::from_fn(move || {
            if start >= order.len() {
                return None;
            }
            let s = self.scores[order[start]];
            let mut end = start + 1;
            while end < order.len() && self.scores[order[end]] == s {
                end += 1;
            }
            let r = start..end;
            start = end;
            Some(r)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocPoint {
    /// Users scoring at or above this are predicted positive; the first
    /// point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Curve from bare `(fpr, tpr)` points, e.g. a hand-built one.
    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let pts: Vec<RocPoint> = points
            .iter()
            .map(|&(fpr, tpr)| RocPoint {
                threshold: f64::NAN,
                fpr,
                tpr,
            })
            .collect();
        let ok = pts
            .windows(2)
            .all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr)
            && pts.first().is_some_and(|p| p.fpr == 0.0 && p.tpr == 0.0)
            && pts.last().is_some_and(|p| p.fpr == 1.0 && p.tpr == 1.0);
        if !ok {
            return Err(Error::Invalid(
                "ROC points must run monotonically from (0,0) to (1,1)".into(),
            ));
        }
        Ok(RocCurve { points: pts })
    }

    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }
}

pub fn roc(set: &ScoredSet) -> Result<RocCurve> {
    set.require_both()?;
    let p = set.positives() as f64;
    let n = set.negatives() as f64;
    let order = set.order();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in set.groups(&order) {
        for &i in &order[g.clone()] {
            if set.labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            threshold: set.scores[order[g.start]],
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    Ok(RocCurve { points })
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    set.require_both()?;
    let order = set.order();
    let w = vec![1.0; set.len()];
    Ok(weighted_auc(set, &order, &w))
}

/// AUC with per-user multiplicities `w`, given the descending order.
fn weighted_auc(set: &ScoredSet, order: &[usize], w: &[f64]) -> f64 {
    let (mut cum_pos, mut area, mut tot_neg) = (0.0, 0.0, 0.0);
    for g in set.groups(order) {
        let (mut pos, mut neg) = (0.0, 0.0);
        for &i in &order[g] {
            if set.labels[i] {
                pos += w[i];
            } else {
                neg += w[i];
            }
        }
        area += neg * (cum_pos + pos / 2.0);
        cum_pos += pos;
        tot_neg += neg;
    }
    area / (cum_pos * tot_neg)
}

/// TPR at `target_fpr`, interpolating linearly between the curve points
/// that straddle it.
pub fn tpr_at_fpr(curve: &RocCurve, target_fpr: f64) -> f64 {
    let pts = &curve.points;
    let t = target_fpr.clamp(0.0, 1.0);
    let Some(i) = pts.iter().rposition(|p| p.fpr <= t) else {
        return 0.0;
    };
    let a = &pts[i];
    if a.fpr == t || i + 1 == pts.len() {
        return a.tpr;
    }
    let b = &pts[i + 1];
    a.tpr + (b.tpr - a.tpr) * (t - a.fpr) / (b.fpr - a.fpr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall at every distinct score threshold, highest first.
pub fn precision_recall(set: &ScoredSet) -> Result<Vec<PrPoint>> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::DegenerateLabels(
            "no positives; recall is undefined".into(),
        ));
    }
    let order = set.order();
    let mut out = Vec::new();
    let (mut tp, mut predicted) = (0usize, 0usize);
    for g in set.groups(&order) {
        for &i in &order[g.clone()] {
            predicted += 1;
            tp += set.labels[i] as usize;
        }
        out.push(PrPoint {
            threshold: set.scores[order[g.start]],
            recall: tp as f64 / p as f64,
            precision: tp as f64 / predicted as f64,
        });
    }
    Ok(out)
}

/// F1 of the rule `score >= threshold`; 0 when nothing is predicted
/// positive or nothing predicted is correct.
pub fn f1_at(set: &ScoredSet, threshold: f64) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::DegenerateLabels(
            "no positives; recall is undefined".into(),
        ));
    }
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if s >= threshold {
            predicted += 1;
            tp += l as usize;
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / p as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    /// `auc(a) - auc(b)` on the full set.
    pub observed_diff: f64,
    pub resamples: usize,
    /// Resamples in which `a` failed to beat `b`.
    pub non_positive: usize,
    pub p_value: f64,
    pub significant: bool,
}

/// One-sided paired bootstrap test that model `a` has higher AUC than `b`
/// on the same users. Each resample draws users with replacement from its
/// own derived stream, so the result does not depend on thread count.
pub fn bootstrap_auc_diff<R: Rng + ?Sized>(
    a: &ScoredSet,
    b: &ScoredSet,
    resamples: usize,
    rng: &mut R,
) -> Result<BootstrapResult> {
    if a.labels != b.labels {
        return Err(Error::Invalid(
            "bootstrap needs both score sets over the same labeled users".into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::InvalidValue {
            key: "resamples".into(),
            msg: "must be >= 1".into(),
        });
    }
    let observed_diff = auc(a)? - auc(b)?;
    let base: u64 = rng.random();
    let (oa, ob) = (a.order(), b.order());
    let n = a.len();
    let diffs: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::derive_rng(base, &format!("bootstrap/{r}"));
            let mut w = vec![0.0; n];
            for _ in 0..=MAX_REDRAWS {
                w.iter_mut().for_each(|v| *v = 0.0);
                let mut pos = 0usize;
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    w[i] += 1.0;
                    pos += a.labels[i] as usize;
                }
                if pos > 0 && pos < n {
                    return Ok(weighted_auc(a, &oa, &w) - weighted_auc(b, &ob, &w));
                }
            }
            Err(Error::DegenerateLabels(format!(
                "bootstrap resample {r} drew a single class {MAX_REDRAWS} times in a row"
            )))
        })
        .collect::<Result<_>>()?;
    let non_positive = diffs.iter().filter(|&&d| d <= 0.0).count();
    let p_value = (1 + non_positive) as f64 / (1 + resamples) as f64;
    Ok(BootstrapResult {
        observed_diff,
        resamples,
        non_positive,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}
