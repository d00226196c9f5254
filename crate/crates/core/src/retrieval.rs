//! Stage 1: candidate entities for a sentence without mentions.
//!
//! Sentences (with their document context) and entities are embedded by two
//! independent encoders and scored by inner product against a precomputed
//! entity matrix. The bi-encoder is trained with a multi-label NCE objective,
//! with random negatives in the first iteration and negatives mined by the
//! previous iteration's model afterwards.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{
    read_f64s, DenseVector, EncoderGrad, EncoderOptimizer, EncoderParams, FeatureCounts,
    FeatureSpec, Side, TextEncoder,
};
use crate::error::{Error, Result};
use crate::kb::{entity_text, KbStore, CLS, SEP};
use crate::math;
use crate::optim::AdamConfig;
use crate::registry::{params_or_default, Registry};

/// Precomputed unit vectors, one row per non-sentinel KB entity in KB order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub ids: Vec<String>,
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    /// Row in the index (equals the KB record index).
    pub row: usize,
    pub score: f64,
}

/// Scored candidates, sorted by score descending then id ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: String,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(&self, k: usize) -> CandidateSet {
        CandidateSet {
            query: self.query.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }

    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.entity_id == entity_id)
    }
}

fn ranking_order(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_vector(&self, i: usize) -> DenseVector {
        DenseVector::from_unit(self.row(i).to_vec())
    }

    pub fn scores(&self, query: &DenseVector) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        Ok(self
            .matrix
            .chunks_exact(self.dim)
            .map(|row| math::dot(row, query.as_slice()))
            .collect())
    }

    /// Exact top-K by inner product.
    pub fn search(&self, query: &DenseVector, k: usize) -> Result<CandidateSet> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            ranking_order((scores[a], &self.ids[a]), (scores[b], &self.ids[b]))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(CandidateSet {
            query: String::new(),
            entries: order
                .into_iter()
                .map(|i| Candidate {
                    entity_id: self.ids[i].clone(),
                    row: i,
                    score: scores[i],
                })
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(INDEX_MAGIC)?;
            w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
            w.write_all(&(self.dim as u32).to_le_bytes())?;
            w.write_all(&self.fingerprint.to_le_bytes())?;
            for id in &self.ids {
                w.write_all(&(id.len() as u32).to_le_bytes())?;
                w.write_all(id.as_bytes())?;
            }
            for x in &self.matrix {
                w.write_all(&x.to_le_bytes())?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::BadParamFile("bad index magic".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8).map_err(io)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let fingerprint = u64::from_le_bytes(b8);
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4).map_err(io)?;
            let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut buf).map_err(io)?;
            ids.push(
                String::from_utf8(buf).map_err(|_| Error::BadParamFile("non-UTF-8 id".into()))?,
            );
        }
        let matrix = read_f64s(&mut r, count * dim).map_err(io)?;
        Ok(VectorIndex {
            ids,
            dim,
            matrix,
            fingerprint,
        })
    }
}

const INDEX_MAGIC: &[u8; 8] = b"ELINDEX1";

/// One row per non-sentinel entity, encoded from `entity_text`.
pub fn build_index(encoder: &dyn TextEncoder, kb: &KbStore) -> Result<VectorIndex> {
    let dim = encoder.dim();
    let mut matrix = Vec::with_capacity(kb.num_regular() * dim);
    for e in kb.regular() {
        matrix.extend_from_slice(encoder.encode_tokens(&entity_text(e))?.as_slice());
    }
    Ok(VectorIndex {
        ids: kb.regular().iter().map(|e| e.id.clone()).collect(),
        dim,
        matrix,
        fingerprint: encoder.fingerprint(),
    })
}

/// `build_index` for the hashed encoder, which must be the entity side.
pub fn build_entity_index(params: &EncoderParams, kb: &KbStore) -> Result<VectorIndex> {
    if params.side != Side::Entity {
        return Err(Error::InvalidArgument(format!(
            "index needs entity-side parameters, got {}",
            params.side
        )));
    }
    build_index(params, kb)
}

/// `[CLS] x [SEP] ctx(x) [SEP]`.
pub fn sentence_query_tokens(u: &Utterance) -> Vec<String> {
    let mut out = Vec::with_capacity(u.tokens.len() + u.prev_context.len() + u.next_context.len() + 3);
    out.push(CLS.to_owned());
    out.extend(u.tokens.iter().cloned());
    out.push(SEP.to_owned());
    out.extend(u.prev_context.iter().cloned());
    out.extend(u.next_context.iter().cloned());
    out.push(SEP.to_owned());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    pub loss: f64,
    pub grad_gold: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

/// Multi-label NCE: each gold competes only against itself plus the shared
/// negatives, `−Σ_g log(e^g / (e^g + Σ_n e^n))`.
pub fn nce_loss(gold_scores: &[f64], neg_scores: &[f64]) -> Result<NceOutput> {
    if gold_scores.is_empty() {
        return Err(Error::InvalidArgument("NCE needs at least one gold score".into()));
    }
    let neg_lse = math::log_sum_exp(neg_scores);
    let mut loss = 0.0;
    let mut grad_gold = Vec::with_capacity(gold_scores.len());
    let mut grad_neg = vec![0.0; neg_scores.len()];
    for &g in gold_scores {
        let denom = math::log_sum_exp(&[g, neg_lse]);
        loss += denom - g;
        grad_gold.push((g - denom).exp() - 1.0);
        for (gn, &n) in grad_neg.iter_mut().zip(neg_scores) {
            *gn += (n - denom).exp();
        }
    }
    Ok(NceOutput {
        loss,
        grad_gold,
        grad_neg,
    })
}

/// Per-sentence negative entity rows, disjoint from the sentence's golds.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NegativeSet(pub Vec<usize>);

/// Uniform without replacement over non-gold rows `0..n_entities`.
pub fn sample_negatives_random(
    n_entities: usize,
    gold_rows: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeSet> {
    let mut pool: Vec<usize> = (0..n_entities).filter(|r| !gold_rows.contains(r)).collect();
    if count > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} negatives from {} non-gold entities",
            pool.len()
        )));
    }
    let (chosen, _) = pool.partial_shuffle(rng, count);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(NegativeSet(chosen))
}

/// Highest-scoring non-gold rows: retrieve `pool` candidates, drop golds,
/// keep the first `count`.
pub fn mine_hard_negatives(
    index: &VectorIndex,
    query: &DenseVector,
    gold_rows: &[usize],
    count: usize,
    pool: usize,
) -> Result<NegativeSet> {
    let k = pool.max(count + gold_rows.len()).min(index.len()).max(1);
    let hits = index.search(query, k)?;
    Ok(NegativeSet(
        hits.entries
            .into_iter()
            .map(|c| c.row)
            .filter(|r| !gold_rows.contains(r))
            .take(count)
            .collect(),
    ))
}

/// `mine_hard_negatives` with the hashed sentence encoder; the index must
/// have been built by the entity encoder paired with it.
pub fn mine_hard_negatives_for(
    sentence: &EncoderParams,
    entity: &EncoderParams,
    index: &VectorIndex,
    query_tokens: &[String],
    gold_rows: &[usize],
    count: usize,
    pool: usize,
) -> Result<NegativeSet> {
    if index.fingerprint != entity.compute_fingerprint() {
        return Err(Error::InvalidArgument(
            "index fingerprint does not match the entity encoder".into(),
        ));
    }
    let q = sentence.encode(query_tokens)?;
    mine_hard_negatives(index, &q, gold_rows, count, pool)
}

pub struct NegativeRequest<'a> {
    pub index: &'a VectorIndex,
    pub query: &'a DenseVector,
    pub gold_rows: &'a [usize],
    pub count: usize,
    pub pool: usize,
}

/// A source of training negatives for one iteration of bi-encoder training.
pub trait NegativeSampler: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether negatives are redrawn every epoch or fixed for the iteration.
    fn per_epoch(&self) -> bool;
    fn sample(&self, req: &NegativeRequest<'_>, rng: &mut ChaCha8Rng) -> Result<NegativeSet>;
}

#[derive(Debug, Default, Deserialize)]
pub struct RandomNegatives;

impl NegativeSampler for RandomNegatives {
    fn name(&self) -> &'static str {
        "random"
    }

    fn per_epoch(&self) -> bool {
        true
    }

    fn sample(&self, req: &NegativeRequest<'_>, rng: &mut ChaCha8Rng) -> Result<NegativeSet> {
        let available = req.index.len() - req.gold_rows.len();
        sample_negatives_random(req.index.len(), req.gold_rows, req.count.min(available), rng)
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct HardNegatives;

impl NegativeSampler for HardNegatives {
    fn name(&self) -> &'static str {
        "hard"
    }

    fn per_epoch(&self) -> bool {
        false
    }

    fn sample(&self, req: &NegativeRequest<'_>, _rng: &mut ChaCha8Rng) -> Result<NegativeSet> {
        mine_hard_negatives(req.index, req.query, req.gold_rows, req.count, req.pool)
    }
}

pub fn negative_sampler_registry() -> Registry<dyn NegativeSampler> {
    fn random(p: &serde_json::Value) -> Result<Box<dyn NegativeSampler>> {
        Ok(Box::new(params_or_default::<RandomNegatives>(p)?))
    }
    fn hard(p: &serde_json::Value) -> Result<Box<dyn NegativeSampler>> {
        Ok(Box::new(params_or_default::<HardNegatives>(p)?))
    }
    Registry::new("negative sampler")
        .with("random", random)
        .with("hard", hard)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiEncoderConfig {
    pub dim: usize,
    pub features: FeatureSpec,
    pub init_seed: u64,
    pub seed: u64,
    /// Negative sampler per iteration, by registry name.
    pub schedule: Vec<String>,
    pub epochs_per_iteration: usize,
    pub negatives: usize,
    pub hard_pool: usize,
    pub batch_size: usize,
    /// Multiplier applied to `S1ᵀE1` inside the loss (inverse temperature).
    pub score_scale: f64,
    pub adam: AdamConfig,
    pub recall_ks: Vec<usize>,
    /// Cap on training steps per epoch; `None` runs full epochs.
    pub max_steps: Option<usize>,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        BiEncoderConfig {
            dim: 64,
            features: FeatureSpec::default(),
            init_seed: 17,
            seed: 7,
            schedule: vec!["random".into(), "hard".into(), "hard".into()],
            epochs_per_iteration: 1,
            negatives: 63,
            hard_pool: 100,
            batch_size: 16,
            score_scale: 20.0,
            adam: AdamConfig::with_lr(5e-4),
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            max_steps: None,
        }
    }
}

pub const DEFAULT_RECALL_KS: [usize; 5] = [1, 16, 32, 64, 128];

/// Both sides of a bi-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    pub sentence: EncoderParams,
    pub entity: EncoderParams,
}

impl BiEncoder {
    /// Both sides start from the same embedding table and an identity
    /// projection, so the untrained model scores lexical overlap.
    pub fn init(cfg: &BiEncoderConfig) -> Result<Self> {
        let sentence = EncoderParams::new(cfg.features.clone(), cfg.dim, Side::Sentence, cfg.init_seed)?;
        let mut entity = sentence.clone();
        entity.side = Side::Entity;
        Ok(BiEncoder { sentence, entity })
    }

    pub fn index(&self, kb: &KbStore) -> Result<VectorIndex> {
        build_entity_index(&self.entity, kb)
    }

    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.sentence.save(dir.join(format!("{prefix}_sentence.bin")))?;
        self.entity.save(dir.join(format!("{prefix}_entity.bin")))
    }

    pub fn load(dir: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(BiEncoder {
            sentence: EncoderParams::load(dir.join(format!("{prefix}_sentence.bin")))?,
            entity: EncoderParams::load(dir.join(format!("{prefix}_entity.bin")))?,
        })
    }
}

/// One training query: tokens for the sentence-side encoder and gold rows.
#[derive(Debug, Clone)]
pub struct TrainQuery {
    pub tokens: Vec<String>,
    pub gold_rows: Vec<usize>,
}

pub fn retrieval_queries(utterances: &[Utterance], kb: &KbStore) -> Vec<TrainQuery> {
    utterances
        .iter()
        .filter_map(|u| {
            let gold_rows: Vec<usize> = u
                .gold_entities()
                .into_iter()
                .filter_map(|id| kb.index_of(id))
                .filter(|&r| r < kb.num_regular())
                .collect();
            (!gold_rows.is_empty()).then(|| TrainQuery {
                tokens: sentence_query_tokens(u),
                gold_rows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub sampler: String,
    pub steps: usize,
    pub mean_loss: f64,
    pub recall: Option<RecallTable>,
}

/// Trains a bi-encoder in place. `eval` (queries, gold rows) is scored after
/// every iteration when given.
pub fn train_bi_encoder(
    model: &mut BiEncoder,
    queries: &[TrainQuery],
    kb: &KbStore,
    cfg: &BiEncoderConfig,
    eval: Option<&[TrainQuery]>,
) -> Result<Vec<IterationLog>> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no training queries".into()));
    }
    let registry = negative_sampler_registry();
    let samplers = cfg
        .schedule
        .iter()
        .map(|name| registry.create_default(name))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entity_feats: Vec<FeatureCounts> = kb
        .regular()
        .iter()
        .map(|e| model.entity.featurize(&entity_text(e)))
        .collect();
    let query_feats: Vec<FeatureCounts> = queries
        .iter()
        .map(|q| model.sentence.featurize(&q.tokens))
        .collect();
    let mut sent_opt = EncoderOptimizer::new(&model.sentence, cfg.adam);
    let mut ent_opt = EncoderOptimizer::new(&model.entity, cfg.adam);
    let mut logs = Vec::with_capacity(samplers.len());

    for (iteration, sampler) in samplers.iter().enumerate() {
        let index = model.index(kb)?;
        let fixed: Option<Vec<NegativeSet>> = if sampler.per_epoch() {
            None
        } else {
            Some(draw_negatives(sampler.as_ref(), model, &index, queries, &query_feats, cfg, &mut rng)?)
        };
        let mut total_loss = 0.0;
        let mut steps = 0usize;
        let mut seen = 0usize;
        for _epoch in 0..cfg.epochs_per_iteration {
            let negatives = match &fixed {
                Some(n) => n.clone(),
                None => draw_negatives(sampler.as_ref(), model, &index, queries, &query_feats, cfg, &mut rng)?,
            };
            let mut order: Vec<usize> = (0..queries.len()).collect();
            order.shuffle(&mut rng);
            for (b, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                if cfg.max_steps.is_some_and(|m| b >= m) {
                    break;
                }
                let loss = nce_batch_step(
                    model,
                    &mut sent_opt,
                    &mut ent_opt,
                    batch,
                    queries,
                    &query_feats,
                    &entity_feats,
                    &negatives,
                    cfg.score_scale,
                )
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::Diverged(format!(
                        "iteration {iteration}, step {steps}: {m}"
                    )),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("iteration {iteration}, step {steps}: loss {loss}")));
                }
                total_loss += loss;
                seen += batch.len();
                steps += 1;
            }
        }
        let recall = match eval {
            Some(eval) => {
                let index = model.index(kb)?;
                Some(recall_at_k_queries(&index, &model.sentence, eval, &cfg.recall_ks)?)
            }
            None => None,
        };
        let log_entry = IterationLog {
            iteration: iteration + 1,
            sampler: sampler.name().to_owned(),
            steps,
            mean_loss: if seen > 0 { total_loss / seen as f64 } else { 0.0 },
            recall,
        };
        log::info!(
            "bi-encoder iteration {} ({}): {} steps, mean loss {:.4}{}",
            log_entry.iteration,
            log_entry.sampler,
            steps,
            log_entry.mean_loss,
            log_entry
                .recall
                .as_ref()
                .map(|r| format!(", recall {:?}", r.recall))
                .unwrap_or_default()
        );
        logs.push(log_entry);
    }
    Ok(logs)
}

fn draw_negatives(
    sampler: &dyn NegativeSampler,
    model: &BiEncoder,
    index: &VectorIndex,
    queries: &[TrainQuery],
    query_feats: &[FeatureCounts],
    cfg: &BiEncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NegativeSet>> {
    queries
        .iter()
        .zip(query_feats)
        .map(|(q, feats)| {
            let query = model.sentence.encode_features(feats)?;
            sampler.sample(
                &NegativeRequest {
                    index,
                    query: &query,
                    gold_rows: &q.gold_rows,
                    count: cfg.negatives,
                    pool: cfg.hard_pool,
                },
                rng,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn nce_batch_step(
    model: &mut BiEncoder,
    sent_opt: &mut EncoderOptimizer,
    ent_opt: &mut EncoderOptimizer,
    batch: &[usize],
    queries: &[TrainQuery],
    query_feats: &[FeatureCounts],
    entity_feats: &[FeatureCounts],
    negatives: &[NegativeSet],
    scale: f64,
) -> Result<f64> {
    let d = model.sentence.dim;
    let mut sent_grad = EncoderGrad::new(d);
    let mut ent_grad = EncoderGrad::new(d);
    let mut ent_cache = HashMap::new();
    let mut ent_grad_v: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut ent_order: Vec<usize> = Vec::new();
    let mut batch_loss = 0.0;
    for &qi in batch {
        let q = &queries[qi];
        let s_cache = model.sentence.forward(&query_feats[qi])?;
        let s = s_cache.vector.as_slice();
        let rows: Vec<usize> = q.gold_rows.iter().chain(&negatives[qi].0).copied().collect();
        let mut scores = Vec::with_capacity(rows.len());
        for &r in &rows {
            if let std::collections::hash_map::Entry::Vacant(slot) = ent_cache.entry(r) {
                slot.insert(model.entity.forward(&entity_feats[r])?);
                ent_order.push(r);
            }
            scores.push(scale * math::dot(s, ent_cache[&r].vector.as_slice()));
        }
        let n_gold = q.gold_rows.len();
        let out = nce_loss(&scores[..n_gold], &scores[n_gold..])?;
        batch_loss += out.loss;
        let mut grad_s = vec![0.0; d];
        for (&r, &gs) in rows.iter().zip(out.grad_gold.iter().chain(&out.grad_neg)) {
            let g = gs * scale;
            let e = ent_cache[&r].vector.as_slice();
            let acc = ent_grad_v.entry(r).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                grad_s[k] += g * e[k];
                acc[k] += g * s[k];
            }
        }
        model
            .sentence
            .backward(&query_feats[qi], &s_cache, &grad_s, &mut sent_grad);
    }
    for r in ent_order {
        model
            .entity
            .backward(&entity_feats[r], &ent_cache[&r], &ent_grad_v[&r], &mut ent_grad);
    }
    let inv = 1.0 / batch.len() as f64;
    sent_grad.scale(inv);
    ent_grad.scale(inv);
    sent_opt.step(&mut model.sentence, &sent_grad)?;
    ent_opt.step(&mut model.entity, &ent_grad)?;
    Ok(batch_loss)
}

/// Multi-label NCE loss of one query against explicit entity rows, with
/// gradients for both encoders. Used for gradient checking.
pub fn nce_query_loss(
    model: &BiEncoder,
    query_tokens: &[String],
    entity_tokens: &[Vec<String>],
    n_gold: usize,
    scale: f64,
) -> Result<(f64, EncoderGrad, EncoderGrad)> {
    let d = model.sentence.dim;
    let qf = model.sentence.featurize(query_tokens);
    let s_cache = model.sentence.forward(&qf)?;
    let efs: Vec<FeatureCounts> = entity_tokens.iter().map(|t| model.entity.featurize(t)).collect();
    let caches = efs
        .iter()
        .map(|f| model.entity.forward(f))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = caches
        .iter()
        .map(|c| scale * math::dot(s_cache.vector.as_slice(), c.vector.as_slice()))
        .collect();
    let out = nce_loss(&scores[..n_gold], &scores[n_gold..])?;
    let mut sg = EncoderGrad::new(d);
    let mut eg = EncoderGrad::new(d);
    let mut grad_s = vec![0.0; d];
    for ((f, c), &g) in efs.iter().zip(&caches).zip(out.grad_gold.iter().chain(&out.grad_neg)) {
        let g = g * scale;
        let gv: Vec<f64> = s_cache.vector.as_slice().iter().map(|x| g * x).collect();
        model.entity.backward(f, c, &gv, &mut eg);
        for (acc, e) in grad_s.iter_mut().zip(c.vector.as_slice()) {
            *acc += g * e;
        }
    }
    model.sentence.backward(&qf, &s_cache, &grad_s, &mut sg);
    Ok((out.loss, sg, eg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    /// Gold entity occurrences evaluated.
    pub total: usize,
}

impl RecallTable {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn header(ks: &[usize]) -> String {
        let mut s = format!("{:<6}| {:<28}", "Stage", "Methods");
        for k in ks {
            let _ = write!(s, "| {:>8} ", format!("Rec@{k}"));
        }
        s
    }

    /// One row in percent, shaped like the header.
    pub fn row(&self, stage: &str, method: &str) -> String {
        let mut s = format!("{stage:<6}| {method:<28}");
        for r in &self.recall {
            let _ = write!(s, "| {:>8.2} ", 100.0 * r);
        }
        s
    }
}

/// Micro-averaged recall over gold occurrences of `queries`.
pub fn recall_at_k_queries(
    index: &VectorIndex,
    sentence: &dyn TextEncoder,
    queries: &[TrainQuery],
    ks: &[usize],
) -> Result<RecallTable> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty K set".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    let max_k = *ks.iter().max().unwrap();
    for q in queries {
        let found = index.search(&sentence.encode_tokens(&q.tokens)?, max_k)?;
        for &g in &q.gold_rows {
            total += 1;
            if let Some(rank) = found.entries.iter().position(|c| c.row == g) {
                for (h, &k) in hits.iter_mut().zip(ks) {
                    if rank < k {
                        *h += 1;
                    }
                }
            }
        }
    }
    Ok(RecallTable {
        ks: ks.to_vec(),
        recall: hits
            .into_iter()
            .map(|h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect(),
        total,
    })
}

/// Recall@K of stage-1 retrieval over every non-NIL gold mention of `eval`.
pub fn recall_at_k(
    index: &VectorIndex,
    sentence: &dyn TextEncoder,
    kb: &KbStore,
    eval: &[Utterance],
    ks: &[usize],
) -> Result<RecallTable> {
    recall_at_k_queries(index, sentence, &evaluation_queries(eval, kb), ks)
}

/// One query per utterance with a gold row per non-NIL mention occurrence.
pub fn evaluation_queries(eval: &[Utterance], kb: &KbStore) -> Vec<TrainQuery> {
    eval.iter()
        .filter_map(|u| {
            let gold_rows: Vec<usize> = u
                .mentions
                .iter()
                .filter_map(|m| kb.index_of(&m.entity_id))
                .filter(|&r| r < kb.num_regular())
                .collect();
            (!gold_rows.is_empty()).then(|| TrainQuery {
                tokens: sentence_query_tokens(u),
                gold_rows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    #[serde(flatten)]
    pub bi_encoder: BiEncoderConfig,
    /// Candidates kept per sentence for the recognizer.
    pub top_k: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            bi_encoder: BiEncoderConfig::default(),
            top_k: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRetriever {
    pub model: BiEncoder,
    pub history: Vec<IterationLog>,
}

/// Stage-1 training: `schedule.len()` iterations (default random, hard, hard).
pub fn train_retriever(
    train: &[Utterance],
    kb: &KbStore,
    cfg: &RetrieverConfig,
    eval: Option<&[Utterance]>,
) -> Result<TrainedRetriever> {
    let queries = retrieval_queries(train, kb);
    let eval_queries = eval.map(|e| evaluation_queries(e, kb));
    let mut model = BiEncoder::init(&cfg.bi_encoder)?;
    let history = train_bi_encoder(&mut model, &queries, kb, &cfg.bi_encoder, eval_queries.as_deref())?;
    Ok(TrainedRetriever { model, history })
}

/// Top-K candidates for every utterance, query = sentence plus context.
pub fn retrieve_candidates(
    sentence: &dyn TextEncoder,
    index: &VectorIndex,
    utterances: &[Utterance],
    k: usize,
) -> Result<Vec<CandidateSet>> {
    utterances
        .iter()
        .map(|u| {
            let mut set = index.search(&sentence.encode_tokens(&sentence_query_tokens(u))?, k)?;
            set.query = format!("{}#{}", u.doc_id, u.sent_index);
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{EntityRecord, Mode};
    use rand::Rng;

    fn kb_of(titles: &[&str]) -> KbStore {
        KbStore::from_records(
            titles
                .iter()
                .enumerate()
                .map(|(i, t)| EntityRecord {
                    id: format!("e{i}"),
                    title: t.to_string(),
                    aliases: vec![],
                    description: String::new(),
                })
                .collect(),
            Mode::Track1,
        )
        .unwrap()
    }

    fn raw_index(rows: Vec<Vec<f64>>) -> VectorIndex {
        let dim = rows[0].len();
        VectorIndex {
            ids: (0..rows.len()).map(|i| format!("e{i:03}")).collect(),
            dim,
            matrix: rows.into_iter().flatten().collect(),
            fingerprint: 0,
        }
    }

    fn exhaustive(index: &VectorIndex, q: &DenseVector) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|i| (index.ids[i].clone(), math::dot(index.row(i), q.as_slice())))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> DenseVector {
        DenseVector::normalized((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn search_full_k_equals_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let index = raw_index((0..40).map(|_| unit(&mut rng, 8).into_inner()).collect());
        for k in [1, 5, 40, 100] {
            let q = unit(&mut rng, 8);
            let got: Vec<(String, f64)> = index
                .search(&q, k)
                .unwrap()
                .entries
                .into_iter()
                .map(|c| (c.entity_id, c.score))
                .collect();
            let mut want = exhaustive(&index, &q);
            want.truncate(k);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn stored_row_ranks_first_and_ties_by_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shared = unit(&mut rng, 4).into_inner();
        let index = raw_index(vec![unit(&mut rng, 4).into_inner(), shared.clone(), shared.clone()]);
        let hits = index.search(&DenseVector::from_unit(shared), 3).unwrap();
        assert_eq!(hits.entries[0].entity_id, "e001");
        assert_eq!(hits.entries[1].entity_id, "e002");
        assert!((hits.entries[0].score - 1.0).abs() < 1e-6);
        assert!(matches!(
            raw_index(vec![vec![1.0]]).search(&DenseVector::basis(1), 0),
            Err(Error::InvalidArgument(_))
        ));
        let empty = VectorIndex { ids: vec![], dim: 4, matrix: vec![], fingerprint: 0 };
        assert!(matches!(empty.search(&DenseVector::basis(4), 1), Err(Error::EmptyIndex)));
    }

    #[test]
    fn index_builds_and_fingerprints() {
        let kb = kb_of(&["alpha one", "beta two", "gamma three"]);
        let cfg = BiEncoderConfig {
            dim: 8,
            features: FeatureSpec { buckets: 256, ..Default::default() },
            ..Default::default()
        };
        let mut model = BiEncoder::init(&cfg).unwrap();
        let a = model.index(&kb).unwrap();
        assert_eq!((a.len(), a.matrix.len()), (3, 24));
        assert_eq!(a, model.index(&kb).unwrap());
        assert!(build_entity_index(&model.sentence, &kb).is_err());
        let queries = vec![TrainQuery { tokens: vec!["alpha".into()], gold_rows: vec![0] }];
        let cfg1 = BiEncoderConfig { schedule: vec!["random".into()], epochs_per_iteration: 1, negatives: 2, ..cfg.clone() };
        train_bi_encoder(&mut model, &queries, &kb, &cfg1, None).unwrap();
        assert_ne!(a.fingerprint, model.index(&kb).unwrap().fingerprint);
        let f = tempfile::NamedTempFile::new().unwrap();
        a.save(f.path()).unwrap();
        assert_eq!(VectorIndex::load(f.path()).unwrap(), a);
    }

    #[test]
    fn zero_steps_leaves_params() {
        let kb = kb_of(&["alpha one", "beta two", "gamma three"]);
        let cfg = BiEncoderConfig {
            dim: 8,
            features: FeatureSpec { buckets: 256, ..Default::default() },
            negatives: 2,
            max_steps: Some(0),
            ..Default::default()
        };
        let mut model = BiEncoder::init(&cfg).unwrap();
        let before = model.clone();
        let queries = vec![TrainQuery { tokens: vec!["alpha".into()], gold_rows: vec![0] }];
        let logs = train_bi_encoder(&mut model, &queries, &kb, &cfg, None).unwrap();
        assert_eq!(model, before);
        assert_eq!(logs.iter().map(|l| l.sampler.as_str()).collect::<Vec<_>>(), ["random", "hard", "hard"]);
    }

    #[test]
    fn nce_examples() {
        let out = nce_loss(&[0.0], &[0.0, 0.0]).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
        let out = nce_loss(&[2f64.ln()], &[0.0]).unwrap();
        assert!((out.loss - 1.5f64.ln()).abs() < 1e-12);
        assert_eq!(nce_loss(&[0.3, -2.0], &[]).unwrap().loss, 0.0);
        assert!(nce_loss(&[], &[1.0]).is_err());
    }

    #[test]
    fn nce_golds_do_not_compete() {
        // Two golds with a single negative: each term only sees itself + negatives.
        let out = nce_loss(&[0.0, 0.0], &[0.0]).unwrap();
        assert!((out.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_negatives_forced_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_negatives_random(3, &[0], 2, &mut rng).unwrap().0, vec![1, 2]);
        let a = sample_negatives_random(50, &[3], 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives_random(50, &[3], 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_negatives_random(3, &[0], 3, &mut rng).is_err());
    }

    #[test]
    fn random_negatives_never_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(2..30);
            let gold: Vec<usize> = (0..rng.gen_range(1..n)).map(|_| rng.gen_range(0..n)).collect();
            let mut distinct = gold.clone();
            distinct.sort();
            distinct.dedup();
            let count = rng.gen_range(0..=n - distinct.len());
            let neg = sample_negatives_random(n, &gold, count, &mut rng).unwrap();
            assert_eq!(neg.0.len(), count);
            assert!(neg.0.iter().all(|r| !gold.contains(r)));
        }
    }

    #[test]
    fn hard_negatives_skip_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let index = raw_index((0..20).map(|_| unit(&mut rng, 6).into_inner()).collect());
        let q = unit(&mut rng, 6);
        let ranked = index.search(&q, 20).unwrap();
        let top = ranked.entries[0].row;
        let neg = mine_hard_negatives(&index, &q, &[top], 5, 100).unwrap();
        let expect: Vec<usize> = ranked.entries[1..6].iter().map(|c| c.row).collect();
        assert_eq!(neg.0, expect);

        let small = raw_index((0..3).map(|_| unit(&mut rng, 6).into_inner()).collect());
        let neg = mine_hard_negatives(&small, &q, &[1], 3, 100).unwrap();
        let mut rows = neg.0.clone();
        rows.sort();
        assert_eq!(rows, vec![0, 2]);
    }

    #[test]
    fn recall_monotone_and_rank_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| unit(&mut rng, 8).into_inner()).collect();
        let index = raw_index(rows.clone());
        struct Fixed(DenseVector);
        impl TextEncoder for Fixed {
            fn dim(&self) -> usize { self.0.dim() }
            fn encode_tokens(&self, _: &[String]) -> Result<DenseVector> { Ok(self.0.clone()) }
            fn fingerprint(&self) -> u64 { 0 }
        }
        let q = unit(&mut rng, 8);
        let ranked = index.search(&q, 40).unwrap();
        let enc = Fixed(q);
        let at = |rank: usize| TrainQuery { tokens: vec![], gold_rows: vec![ranked.entries[rank].row] };
        let t = recall_at_k_queries(&index, &enc, &[at(0)], &[1, 16, 32]).unwrap();
        assert_eq!(t.recall, vec![1.0, 1.0, 1.0]);
        let t = recall_at_k_queries(&index, &enc, &[at(19)], &[1, 16, 32]).unwrap();
        assert_eq!(t.recall, vec![0.0, 0.0, 1.0]);
        let qs: Vec<TrainQuery> = (0..40).map(at).collect();
        let t = recall_at_k_queries(&index, &enc, &qs, &DEFAULT_RECALL_KS).unwrap();
        assert!(t.recall.windows(2).all(|w| w[0] <= w[1]));
        assert!(recall_at_k_queries(&index, &enc, &qs, &[]).is_err());
    }

    #[test]
    fn nce_encoder_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check;
        let cfg = BiEncoderConfig {
            dim: 4,
            features: FeatureSpec { buckets: 32, ..Default::default() },
            ..Default::default()
        };
        let base = BiEncoder::init(&cfg).unwrap();
        let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let query = toks("we met yao ming today");
        let ents = vec![toks("yao ming [SEP] player"), toks("ming dynasty"), toks("other thing")];
        let n_s = base.sentence.embedding.len();
        let n_p = base.sentence.projection.len();
        let pack = |m: &BiEncoder| {
            let mut x = m.sentence.embedding.clone();
            x.extend(&m.sentence.projection);
            x.extend(&m.entity.embedding);
            x.extend(&m.entity.projection);
            x
        };
        let unpack = |x: &[f64]| {
            let mut m = base.clone();
            m.sentence.embedding.copy_from_slice(&x[..n_s]);
            m.sentence.projection.copy_from_slice(&x[n_s..n_s + n_p]);
            m.entity.embedding.copy_from_slice(&x[n_s + n_p..2 * n_s + n_p]);
            m.entity.projection.copy_from_slice(&x[2 * n_s + n_p..]);
            m
        };
        let f = |x: &[f64]| {
            let m = unpack(x);
            let (loss, sg, eg) = nce_query_loss(&m, &query, &ents, 1, 3.0).unwrap();
            let mut g = vec![0.0; x.len()];
            for (&r, row) in &sg.rows {
                g[r as usize * 4..r as usize * 4 + 4].copy_from_slice(row);
            }
            g[n_s..n_s + n_p].copy_from_slice(&sg.projection);
            for (&r, row) in &eg.rows {
                let o = n_s + n_p + r as usize * 4;
                g[o..o + 4].copy_from_slice(row);
            }
            g[2 * n_s + n_p..].copy_from_slice(&eg.projection);
            (loss, g)
        };
        let report = grad_check(f, &pack(&base), 1e-5, 1e-4, None, 0);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn registry_names() {
        let r = negative_sampler_registry();
        assert_eq!(r.names(), ["hard", "random"]);
        assert!(r.create_default("hard").unwrap().name() == "hard");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nce_nonnegative_and_monotone(
                golds in proptest::collection::vec(-5.0f64..5.0, 1..4),
                negs in proptest::collection::vec(-5.0f64..5.0, 0..6),
                bump in 0.01f64..2.0,
            ) {
                let base = nce_loss(&golds, &negs).unwrap();
                prop_assert!(base.loss >= 0.0);
                prop_assert_eq!(base.loss == 0.0, negs.is_empty());
                if !negs.is_empty() {
                    let mut up = golds.clone();
                    up[0] += bump;
                    prop_assert!(nce_loss(&up, &negs).unwrap().loss < base.loss);
                }
            }
        }
    }
}
