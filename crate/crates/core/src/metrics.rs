//! Classification metrics over the four match levels.

use serde::{Deserialize, Serialize};

use crate::corpus::MATCH_LEVELS;

/// Rows are true labels, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; MATCH_LEVELS]; MATCH_LEVELS],
}

impl Confusion {
    pub fn from_pairs(truth: &[usize], pred: &[usize]) -> Self {
        assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(pred) {
            c.counts[t][p] += 1;
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn metrics(&self) -> Metrics {
        let total = self.total();
        let diag: u64 = (0..MATCH_LEVELS).map(|i| self.counts[i][i]).sum();
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for c in 0..MATCH_LEVELS {
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..MATCH_LEVELS).map(|t| self.counts[t][c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            let p = ratio(tp, predicted as f64);
            let r = ratio(tp, actual as f64);
            p_sum += p;
            r_sum += r;
            f_sum += ratio(2.0 * p * r, p + r);
        }
        let n = MATCH_LEVELS as f64;
        Metrics { accuracy: ratio(diag as f64, total as f64), precision: p_sum / n, recall: r_sum / n, f1: f_sum / n }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy and macro-averaged precision, recall and F1, as fractions in [0, 1].
/// Classes with no predictions or no examples contribute 0 to the macro mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn evaluate_predictions(truth: &[usize], pred: &[usize]) -> Metrics {
    Confusion::from_pairs(truth, pred).metrics()
}
