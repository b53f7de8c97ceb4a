//! ROC curves and the area under them, with anomalies as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operating points for every distinct score used as a threshold.
///
/// `thresholds` holds the distinct scores in descending order. `fpr[0]`,
/// `tpr[0]` is the origin (nothing flagged); entry `i + 1` flags every
/// sample scoring at least `thresholds[i]`, ending at (1, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocResult {
    /// Trapezoidal area under the stored curve.
    pub fn trapezoid_area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) * 0.5)
            .sum()
    }

    /// At most `max_points` curve points (always keeping both ends), for
    /// plotting.
    pub fn thinned(&self, max_points: usize) -> Vec<[f64; 2]> {
        let n = self.fpr.len();
        let step = n.div_ceil(max_points.max(2) - 1).max(1);
        let mut out: Vec<[f64; 2]> = (0..n).step_by(step).map(|i| [self.fpr[i], self.tpr[i]]).collect();
        if !(n - 1).is_multiple_of(step) {
            out.push([self.fpr[n - 1], self.tpr[n - 1]]);
        }
        out
    }
}

fn class_counts(is_anomaly: &[bool]) -> Result<(usize, usize)> {
    let positives = is_anomaly.iter().filter(|&&a| a).count();
    let negatives = is_anomaly.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Mann–Whitney statistic via midranks: the probability that a random
/// anomaly outscores a random normal sample, ties counting one half.
pub fn rank_auc(scores: &[f64], is_anomaly: &[bool]) -> Result<f64> {
    check_inputs(scores, is_anomaly)?;
    let (positives, negatives) = class_counts(is_anomaly)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i+1+j)/2.
        let twice_midrank = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| is_anomaly[k]).count() as u128;
        twice_rank_sum += twice_midrank * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

fn check_inputs(scores: &[f64], is_anomaly: &[bool]) -> Result<()> {
    if scores.len() != is_anomaly.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            is_anomaly.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Shape(format!("score {bad} cannot be ranked")));
    }
    Ok(())
}

/// Full ROC curve; `auc` is the rank statistic.
pub fn roc_auc(scores: &[f64], is_anomaly: &[bool]) -> Result<RocResult> {
    check_inputs(scores, is_anomaly)?;
    let (positives, negatives) = class_counts(is_anomaly)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = Vec::new();
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if is_anomaly[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(value);
        fpr.push(fp as f64 / negatives as f64);
        tpr.push(tp as f64 / positives as f64);
    }
    Ok(RocResult {
        thresholds,
        fpr,
        tpr,
        auc: rank_auc(scores, is_anomaly)?,
    })
}
