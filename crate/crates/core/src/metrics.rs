//! Multi-label evaluation: per-class (C-) and overall (O-) precision,
//! recall, F1 and average precision.
//!
//! A label counts as predicted when its probability is strictly greater
//! than the threshold. Per-class ratios with a zero denominator contribute
//! 0 and still count toward the `1/C` average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: scores are {scores:?}, targets are {targets:?}")]
    Shape {
        scores: (usize, usize),
        targets: (usize, usize),
    },
    #[error("no class has a positive example")]
    NoPositives,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-class counts: correct positives, predicted positives and
/// ground-truth positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub correct: Vec<u64>,
    pub predicted: Vec<u64>,
    pub ground_truth: Vec<u64>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.correct.len()
    }
}

fn dims(rows: &[Vec<f64>]) -> (usize, usize) {
    (rows.len(), rows.first().map_or(0, Vec::len))
}

fn check_shapes(scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(usize, usize)> {
    let (sd, td) = (dims(scores), dims(targets));
    let ragged = scores.iter().any(|r| r.len() != sd.1) || targets.iter().any(|r| r.len() != td.1);
    if sd != td || ragged {
        return Err(MetricsError::Shape {
            scores: sd,
            targets: td,
        });
    }
    Ok(sd)
}

pub fn confusion_counts(
    probs: &[Vec<f64>],
    targets: &[Vec<f64>],
    threshold: f64,
) -> Result<ConfusionCounts> {
    let (_, c) = check_shapes(probs, targets)?;
    let mut counts = ConfusionCounts {
        correct: vec![0; c],
        predicted: vec![0; c],
        ground_truth: vec![0; c],
    };
    for (p, y) in probs.iter().zip(targets) {
        for k in 0..c {
            let pred = p[k] > threshold;
            let truth = y[k] > 0.5;
            counts.predicted[k] += pred as u64;
            counts.ground_truth[k] += truth as u64;
            counts.correct[k] += (pred && truth) as u64;
        }
    }
    Ok(counts)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub c_p: f64,
    pub c_r: f64,
    pub c_f1: f64,
    pub o_p: f64,
    pub o_r: f64,
    pub o_f1: f64,
}

pub fn prf1(counts: &ConfusionCounts) -> PrecisionRecallF1 {
    let c = counts.num_classes();
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    for k in 0..c {
        sum_p += ratio(counts.correct[k], counts.predicted[k]);
        sum_r += ratio(counts.correct[k], counts.ground_truth[k]);
    }
    let (c_p, c_r) = if c == 0 {
        (0.0, 0.0)
    } else {
        (sum_p / c as f64, sum_r / c as f64)
    };
    let total = |v: &[u64]| v.iter().sum::<u64>();
    let o_p = ratio(total(&counts.correct), total(&counts.predicted));
    let o_r = ratio(total(&counts.correct), total(&counts.ground_truth));
    PrecisionRecallF1 {
        c_p,
        c_r,
        c_f1: f1(c_p, c_r),
        o_p,
        o_r,
        o_f1: f1(o_p, o_r),
    }
}

/// AP of one ranking: mean over positives of the precision at each
/// positive's rank. Scores sort descending, ties by ascending index.
/// `None` when there are no positives.
pub fn ranked_average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0u64;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// `(C-AP, O-AP)`. Classes without positives are left out of the C-AP mean;
/// O-AP ranks all (sample, class) pairs together, sample-major.
pub fn average_precision(scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    let (n, c) = check_shapes(scores, targets)?;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let t: Vec<bool> = targets.iter().map(|r| r[k] > 0.5).collect();
        if let Some(ap) = ranked_average_precision(&s, &t) {
            per_class.push(ap);
        }
    }
    if per_class.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    let c_ap = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_t: Vec<bool> = targets.iter().flatten().map(|&y| y > 0.5).collect();
    debug_assert_eq!(flat_s.len(), n * c);
    let o_ap = ranked_average_precision(&flat_s, &flat_t).ok_or(MetricsError::NoPositives)?;
    Ok((c_ap, o_ap))
}

/// The eight reported metrics, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MetricsReport {
    pub c_ap: f64,
    pub c_p: f64,
    pub c_r: f64,
    pub c_f1: f64,
    pub o_ap: f64,
    pub o_p: f64,
    pub o_r: f64,
    pub o_f1: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] =
        ["C-AP", "C-P", "C-R", "C-F1", "O-AP", "O-P", "O-R", "O-F1"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.c_ap, self.c_p, self.c_r, self.c_f1, self.o_ap, self.o_p, self.o_r, self.o_f1,
        ]
    }

    /// Header and one row of values scaled by 100, two decimals.
    pub fn table(&self) -> String {
        let head = Self::COLUMNS
            .iter()
            .map(|c| format!("{c:>7}"))
            .collect::<Vec<_>>()
            .join(" ");
        let row = self
            .values()
            .iter()
            .map(|v| format!("{:>7.2}", v * 100.0))
            .collect::<Vec<_>>()
            .join(" ");
        format!("{head}\n{row}")
    }
}

pub fn evaluate(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<MetricsReport> {
    let counts = confusion_counts(probs, targets, DEFAULT_THRESHOLD)?;
    let m = prf1(&counts);
    let (c_ap, o_ap) = average_precision(probs, targets)?;
    Ok(MetricsReport {
        c_ap,
        c_p: m.c_p,
        c_r: m.c_r,
        c_f1: m.c_f1,
        o_ap,
        o_p: m.o_p,
        o_r: m.o_r,
        o_f1: m.o_f1,
    })
}
