//! Ranking objectives over one candidate list.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax};
use crate::registry::{params_or_default, Registry};

pub trait RankingLoss: Send + Sync {
    fn name(&self) -> &'static str;
    /// Loss and its gradient with respect to `scores`.
    fn loss(&self, scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)>;
}

/// `KL(onehot(gold) ‖ softmax(scores))`, which reduces to `−log p_gold`.
pub fn listwise_kl_loss(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("a ranking list needs at least two entries".into()));
    }
    if gold >= scores.len() {
        return Err(Error::InvalidArgument(format!("gold position {gold} outside list of {}", scores.len())));
    }
    let loss = log_sum_exp(scores) - scores[gold];
    let mut grad = softmax(scores);
    grad[gold] -= 1.0;
    Ok((loss, grad))
}

/// `KL(q ‖ softmax(scores))` for an arbitrary target distribution `q`.
pub fn kl_divergence(q: &[f64], scores: &[f64]) -> Result<f64> {
    if q.len() != scores.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), actual: q.len() });
    }
    let lse = log_sum_exp(scores);
    Ok(q.iter()
        .zip(scores)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, s)| qi * (qi.ln() - (s - lse)))
        .sum())
}

/// Mean binary cross-entropy of each entry against gold / not gold.
pub fn pointwise_bce_loss(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if gold >= scores.len() {
        return Err(Error::InvalidArgument(format!("gold position {gold} outside list of {}", scores.len())));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        let y = if i == gold { 1.0 } else { 0.0 };
        // log(1 + e^s) − y·s, stable for both signs.
        loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s;
        let p = 1.0 / (1.0 + (-s).exp());
        grad.push((p - y) / n);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Default, Deserialize)]
pub struct ListwiseKl;

impl RankingLoss for ListwiseKl {
    fn name(&self) -> &'static str {
        "listwise_kl"
    }

    fn loss(&self, scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
        listwise_kl_loss(scores, gold)
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct PointwiseBce;

impl RankingLoss for PointwiseBce {
    fn name(&self) -> &'static str {
        "pointwise_bce"
    }

    fn loss(&self, scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
        pointwise_bce_loss(scores, gold)
    }
}

pub fn ranking_loss_registry() -> Registry<dyn RankingLoss> {
    fn kl(p: &serde_json::Value) -> Result<Box<dyn RankingLoss>> {
        Ok(Box::new(params_or_default::<ListwiseKl>(p)?))
    }
    fn bce(p: &serde_json::Value) -> Result<Box<dyn RankingLoss>> {
        Ok(Box::new(params_or_default::<PointwiseBce>(p)?))
    }
    Registry::new("ranking loss")
        .with("listwise_kl", kl)
        .with("pointwise_bce", bce)
}
