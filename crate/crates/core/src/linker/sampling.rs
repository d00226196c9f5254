//! Which retrieved candidates a training list keeps each epoch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::registry::{params_or_default, Registry};

pub trait CandidateSampler: Send + Sync {
    fn name(&self) -> &'static str;
    /// Picks `m` positions of `scores` (or all when fewer), always including
    /// `gold`. Output is sorted ascending.
    fn sample(&self, scores: &[f64], gold: Option<usize>, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

fn check(scores: &[f64], gold: Option<usize>) -> Result<()> {
    match gold {
        Some(g) if g >= scores.len() => Err(Error::InvalidArgument(format!(
            "gold position {g} outside list of {}",
            scores.len()
        ))),
        _ => Ok(()),
    }
}

fn finish(mut picked: Vec<usize>, gold: Option<usize>) -> Vec<usize> {
    picked.extend(gold);
    picked.sort_unstable();
    picked
}

/// Gold plus `m − 1` draws without replacement, each with probability
/// proportional to `softmax(score / τ)` over what is left.
pub fn dynamic_sample(
    scores: &[f64],
    gold: Option<usize>,
    m: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check(scores, gold)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut pool: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != gold).collect();
    let want = m.saturating_sub(usize::from(gold.is_some())).min(pool.len());
    let max = pool.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = pool.iter().map(|&i| ((scores[i] - max) / temperature).exp()).collect();
    let mut picked = Vec::with_capacity(want + 1);
    for _ in 0..want {
        let total: f64 = weights.iter().sum();
        let k = if total > 0.0 && total.is_finite() {
            let mut u = rng.gen::<f64>() * total;
            let mut k = weights.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    k = j;
                    break;
                }
                u -= w;
            }
            k
        } else {
            // Every remaining weight underflowed: the limit is plain top order.
            (0..pool.len())
                .max_by(|&a, &b| scores[pool[a]].total_cmp(&scores[pool[b]]).then(pool[b].cmp(&pool[a])))
                .unwrap()
        };
        picked.push(pool.swap_remove(k));
        weights.swap_remove(k);
    }
    Ok(finish(picked, gold))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DynamicSampler {
    pub temperature: f64,
}

impl Default for DynamicSampler {
    fn default() -> Self {
        DynamicSampler { temperature: 1.0 }
    }
}

impl CandidateSampler for DynamicSampler {
    fn name(&self) -> &'static str {
        "dynamic"
    }

    fn sample(&self, scores: &[f64], gold: Option<usize>, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        dynamic_sample(scores, gold, m, self.temperature, rng)
    }
}

/// Scores ignored: every non-gold candidate equally likely.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct UniformSampler;

impl CandidateSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(&self, scores: &[f64], gold: Option<usize>, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        check(scores, gold)?;
        let mut pool: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != gold).collect();
        let want = m.saturating_sub(usize::from(gold.is_some())).min(pool.len());
        let (chosen, _) = pool.partial_shuffle(rng, want);
        Ok(finish(chosen.to_vec(), gold))
    }
}

/// The `m − 1` best-scored non-gold candidates, the same every epoch.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct TopSampler;

impl CandidateSampler for TopSampler {
    fn name(&self) -> &'static str {
        "top"
    }

    fn sample(&self, scores: &[f64], gold: Option<usize>, m: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        check(scores, gold)?;
        let mut pool: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != gold).collect();
        pool.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        pool.truncate(m.saturating_sub(usize::from(gold.is_some())));
        Ok(finish(pool, gold))
    }
}

pub fn candidate_sampler_registry() -> Registry<dyn CandidateSampler> {
    fn dynamic(p: &serde_json::Value) -> Result<Box<dyn CandidateSampler>> {
        Ok(Box::new(params_or_default::<DynamicSampler>(p)?))
    }
    fn uniform(p: &serde_json::Value) -> Result<Box<dyn CandidateSampler>> {
        Ok(Box::new(params_or_default::<UniformSampler>(p)?))
    }
    fn top(p: &serde_json::Value) -> Result<Box<dyn CandidateSampler>> {
        Ok(Box::new(params_or_default::<TopSampler>(p)?))
    }
    Registry::new("candidate sampler")
        .with("dynamic", dynamic)
        .with("uniform", uniform)
        .with("top", top)
}
