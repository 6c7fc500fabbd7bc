//! One-vs-rest classification metrics, threshold-curve areas, and
//! epoch-window statistics.
//!
//! Undefined ratios (e.g. recall of a class with no positives) are `None`
//! and are reported as `NA`, never as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Per-class one-vs-rest counts over one evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    pub samples: u64,
}

impl ConfusionCounts {
    /// `None` predictions (non-finite outputs) count as misses for the true
    /// class and as negatives for every other class.
    pub fn from_predictions(truth: &[usize], predicted: &[Option<usize>], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                actual: predicted.len(),
            });
        }
        let mut classes = vec![ClassCounts::default(); n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes {
                return Err(Error::IndexOutOfRange { index: t, limit: n_classes });
            }
            if let Some(p) = p {
                if p >= n_classes {
                    return Err(Error::IndexOutOfRange { index: p, limit: n_classes });
                }
            }
            for (y, c) in classes.iter_mut().enumerate() {
                match (t == y, p == Some(y)) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, true) => c.fp += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
        Ok(Self {
            classes,
            samples: truth.len() as u64,
        })
    }

    /// Fraction of samples whose prediction equals the label.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.classes.iter().map(|c| c.tp).sum(), self.samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(c: &ClassCounts) -> BasicMetrics {
    let accuracy = ratio(c.tp + c.tn, c.total());
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.fp + c.tp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    BasicMetrics {
        accuracy,
        recall,
        precision,
        f1,
    }
}

/// Confusion counts at every distinct threshold, highest first: predicting
/// positive when `score >= threshold`.
fn threshold_sweep(scores: &[f64], truth: &[bool]) -> Result<(Vec<(u64, u64)>, u64, u64)> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("curve scores".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "curve areas need at least one positive and one negative sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, fp));
    }
    Ok((points, pos, neg))
}

/// Area under the ROC curve by the trapezoidal rule over all distinct
/// thresholds; tied scores move along a diagonal segment.
pub fn roc_area(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (points, pos, neg) = threshold_sweep(scores, truth)?;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    let mut twice_area = 0u128;
    for (tp, fp) in points {
        // trapezoid in count units: (fp - prev_fp) * (tp + prev_tp) / 2
        twice_area += ((fp - prev_fp) as u128) * ((tp + prev_tp) as u128);
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the precision-recall curve by right-step summation:
/// `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds.
pub fn pr_area(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (points, pos, _) = threshold_sweep(scores, truth)?;
    let mut prev_tp = 0u64;
    let mut area = 0.0;
    for (tp, fp) in points {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (tp - prev_tp) as f64 / pos as f64 * precision;
        }
        prev_tp = tp;
    }
    Ok(area)
}

fn one_vs_rest<F>(scores: &[Vec<f64>], labels: &[usize], n_classes: usize, area: F) -> Result<Option<f64>>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for y in 0..n_classes {
        let truth: Vec<bool> = labels.iter().map(|&l| l == y).collect();
        if truth.iter().all(|&t| t) || !truth.iter().any(|&t| t) {
            continue;
        }
        let s: Vec<f64> = scores
            .iter()
            .map(|row| row.get(y).copied().ok_or(Error::IndexOutOfRange { index: y, limit: row.len() }))
            .collect::<Result<_>>()?;
        total += area(&s, &truth)?;
        used += 1;
    }
    Ok((used > 0).then(|| total / used as f64))
}

/// Macro average of one-vs-rest ROC areas; classes absent from `labels` are skipped.
pub fn macro_roc_area(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Option<f64>> {
    one_vs_rest(scores, labels, n_classes, roc_area)
}

pub fn macro_pr_area(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Option<f64>> {
    one_vs_rest(scores, labels, n_classes, pr_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMetric {
    Recall,
    Precision,
    F1,
}

impl ClassMetric {
    pub const ALL: [ClassMetric; 3] = [ClassMetric::Recall, ClassMetric::Precision, ClassMetric::F1];

    pub fn of(&self, m: &BasicMetrics) -> Option<f64> {
        match self {
            ClassMetric::Recall => m.recall,
            ClassMetric::Precision => m.precision,
            ClassMetric::F1 => m.f1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassMetric::Recall => "recall",
            ClassMetric::Precision => "precision",
            ClassMetric::F1 => "f1",
        }
    }
}

/// Mean and population variance of one metric over a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub count: usize,
    pub na: usize,
}

impl WindowStat {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut xs = Vec::new();
        let mut na = 0;
        for v in values {
            match v {
                Some(x) if x.is_finite() => xs.push(x),
                _ => na += 1,
            }
        }
        let (mean, variance) = mean_variance(&xs);
        WindowStat {
            mean,
            variance,
            count: xs.len(),
            na,
        }
    }
}

/// Arithmetic mean and population variance.
pub fn mean_variance(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWindowStats {
    pub recall: WindowStat,
    pub precision: WindowStat,
    pub f1: WindowStat,
}

impl ClassWindowStats {
    pub fn get(&self, metric: ClassMetric) -> &WindowStat {
        match metric {
            ClassMetric::Recall => &self.recall,
            ClassMetric::Precision => &self.precision,
            ClassMetric::F1 => &self.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// Inclusive epoch bounds.
    pub window: (usize, usize),
    pub epochs: usize,
    pub per_class: Vec<ClassWindowStats>,
}

/// Statistics over epochs `window.0 ..= window.1`. `epochs` pairs each
/// 1-based epoch number with its counts.
pub fn window_stats_from_counts(epochs: &[(usize, &ConfusionCounts)], window: (usize, usize)) -> Result<WindowStats> {
    let (lo, hi) = window;
    if lo > hi {
        return Err(Error::InvalidArgument(format!("empty window [{lo}, {hi}]")));
    }
    let last = epochs.iter().map(|(e, _)| *e).max().unwrap_or(0);
    if hi > last {
        return Err(Error::InvalidArgument(format!(
            "window [{lo}, {hi}] exceeds run length {last}"
        )));
    }
    let selected: Vec<&ConfusionCounts> = epochs
        .iter()
        .filter(|(e, _)| (lo..=hi).contains(e))
        .map(|(_, c)| *c)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!("no epochs inside window [{lo}, {hi}]")));
    }
    let n_classes = selected[0].classes.len();
    let per_class = (0..n_classes)
        .map(|y| {
            let metrics: Vec<BasicMetrics> = selected.iter().map(|c| basic_metrics(&c.classes[y])).collect();
            let stat = |m: ClassMetric| WindowStat::from_values(metrics.iter().map(|b| m.of(b)));
            ClassWindowStats {
                recall: stat(ClassMetric::Recall),
                precision: stat(ClassMetric::Precision),
                f1: stat(ClassMetric::F1),
            }
        })
        .collect();
    Ok(WindowStats {
        window,
        epochs: selected.len(),
        per_class,
    })
}
