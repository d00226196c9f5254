use serde::{Deserialize, Serialize};

/// Micro-averaged precision, recall and F1 with the counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// An empty side counts as perfect only when the other side is empty too.
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, other: usize| {
            if den == 0 {
                if other == 0 { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(true_positives, predicted, gold);
        let recall = ratio(true_positives, gold, predicted);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

/// Exact-match span F1 micro-averaged over utterances.
pub fn span_f1(pred: &[Vec<(usize, usize)>], gold: &[Vec<(usize, usize)>]) -> Prf {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let g: std::collections::HashSet<_> = g.iter().collect();
        let p: std::collections::HashSet<_> = p.iter().collect();
        tp += p.intersection(&g).count();
        np += p.len();
        ng += g.len();
    }
    Prf::from_counts(tp, np, ng)
}
