//! Detector scoring: confusion counts, derived rates, detection delay, tracking
//! error and ROC analysis.
//!
//! Ratios whose denominator is zero are `None`, never a silent zero.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(predicted: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    let mut c = ConfusionCounts::default();
    predicted.iter().zip(truth).for_each(|(p, t)| c.record(*p, *t));
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(c: &ConfusionCounts) -> Result<BasicMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Empty("confusion counts are all zero"));
    }
    Ok(BasicMetrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.fn_ + c.tp),
    })
}

/// Harmonic mean of precision and recall; `None` if either is undefined or both are zero.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    let sum = p + r;
    (sum > 0.0).then(|| 2.0 * p * r / sum)
}

/// Steps from `onset_step` to the start of the first run of `sustain_m`
/// consecutive alarms that begins at or after onset.
pub fn detection_delay(alarm: &[bool], onset_step: usize, sustain_m: usize) -> Option<u64> {
    first_sustained_run(alarm, onset_step, sustain_m).map(|start| (start - onset_step) as u64)
}

/// Start index of the first `m`-long run of `true` beginning at or after `from`.
pub fn first_sustained_run(alarm: &[bool], from: usize, m: usize) -> Option<usize> {
    let m = m.max(1);
    let mut run = 0usize;
    for (i, &a) in alarm.iter().enumerate().skip(from) {
        run = if a { run + 1 } else { 0 };
        if run == m {
            return Some(i + 1 - m);
        }
    }
    None
}

/// Number of distinct `m`-long alarm runs starting before `until`.
pub fn sustained_runs_before(alarm: &[bool], until: usize, m: usize) -> u64 {
    let m = m.max(1);
    let mut run = 0usize;
    let mut count = 0;
    for (i, &a) in alarm.iter().enumerate() {
        run = if a { run + 1 } else { 0 };
        if run == m && i + 1 - m < until {
            count += 1;
        }
    }
    count
}

pub fn tracking_rmse(q_g: &[f64], q_ref_true: &[f64], window: Range<usize>) -> Result<f64> {
    if q_g.len() != q_ref_true.len() {
        return Err(Error::LengthMismatch { left: q_g.len(), right: q_ref_true.len() });
    }
    if window.start >= window.end || window.end > q_g.len() {
        return Err(Error::Empty("tracking window is empty or out of range"));
    }
    let n = (window.end - window.start) as f64;
    let sum_sq: f64 = q_g[window.clone()].iter().zip(&q_ref_true[window]).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(libm::sqrt(sum_sq / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above the threshold are called anomalous.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ordered by decreasing threshold, from (0, 0) to (1, 1).
    pub points: Vec<RocPoint>,
    /// Trapezoidal area over the full-resolution sweep.
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// ROC sweep over every distinct score (higher = more anomalous).
///
/// The area is always integrated over the full sweep. When `n_thresholds` is
/// non-zero and smaller than the number of distinct scores, the returned
/// points are thinned to that many interior thresholds; both end points are
/// always kept.
pub fn roc_curve(score: &[f64], truth: &[bool], n_thresholds: usize) -> Result<RocCurve> {
    if score.len() != truth.len() {
        return Err(Error::LengthMismatch { left: score.len(), right: truth.len() });
    }
    if score.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("ROC scores must be finite"));
    }
    let positives = truth.iter().filter(|t| **t).count() as u64;
    let negatives = truth.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass("ROC needs at least one positive and one negative"));
    }

    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_unstable_by(|&a, &b| score[b].total_cmp(&score[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = Vec::new();
    points.push(RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 });
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = score[order[i]];
        while i < order.len() && score[order[i]] == thr {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points[points.len() - 1];
        let pt = RocPoint { threshold: thr, tpr: tp as f64 / p, fpr: fp as f64 / n };
        auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
        points.push(pt);
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, tpr: 1.0, fpr: 1.0 });

    let interior = points.len() - 2;
    if n_thresholds > 0 && interior > n_thresholds {
        let last = points.len() - 1;
        let mut thinned = Vec::with_capacity(n_thresholds + 2);
        thinned.push(points[0]);
        for k in 1..=n_thresholds {
            let idx = 1 + ((k * interior) / n_thresholds).saturating_sub(1).min(interior - 1);
            thinned.push(points[idx]);
        }
        thinned.push(points[last]);
        thinned.dedup_by(|a, b| a.threshold == b.threshold);
        points = thinned;
    }
    Ok(RocCurve { points, auc, positives, negatives })
}

/// Scores for one detector over one scenario or a whole suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    /// `None` when not detected (or, for aggregates, nothing was detected).
    pub detection_delay_steps: Option<f64>,
    pub rmse_pu: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let basic = basic_metrics(&counts).ok();
        MetricsReport {
            counts,
            accuracy: basic.map(|b| b.accuracy),
            precision: basic.and_then(|b| b.precision),
            recall: basic.and_then(|b| b.recall),
            f1: basic.and_then(|b| f1_score(b.precision, b.recall)),
            fpr: basic.and_then(|b| b.fpr),
            fnr: basic.and_then(|b| b.fnr),
            detection_delay_steps: None,
            rmse_pu: None,
            auc: None,
        }
    }
}
