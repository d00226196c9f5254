use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{
    retrieve_for_mention, CandidateList, ListOptions, MentionContext, NameVocabulary, DEFAULT_WINDOW, NUM_FEATURES,
};
use super::loss::ranking_loss_registry;
use super::sampling::candidate_sampler_registry;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::kb::{KbStore, Mode, ERROR_ID, NIL_ID};
use crate::math::softmax;
use crate::mlp::{Mlp, MlpShape};
use crate::optim::{AdamConfig, DenseAdam};
use crate::persist::{load_blob, save_blob};
use crate::retrieval::{train_bi_encoder, BiEncoder, BiEncoderConfig, TrainQuery, VectorIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    pub window: usize,
    /// Copies of the mention in the encoder query, see
    /// [`MentionContext::query_tokens`].
    pub mention_repeats: usize,
    /// Entities retrieved per mention.
    pub top_k: usize,
    /// Real entries per training list, gold included; sentinels come on top.
    pub list_size: usize,
    pub sampler: String,
    pub sampler_params: serde_json::Value,
    pub loss: String,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Spurious spans injected per gold training mention, labeled ERROR.
    pub spurious_rate: f64,
    pub init_seed: u64,
    pub seed: u64,
    /// Mention-side bi-encoder. It starts from the same tied lexical
    /// initialization as the sentence retriever.
    pub bi_encoder: BiEncoderConfig,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            window: DEFAULT_WINDOW,
            mention_repeats: 16,
            top_k: 64,
            list_size: 16,
            sampler: "dynamic".into(),
            sampler_params: serde_json::Value::Null,
            loss: "listwise_kl".into(),
            hidden: 32,
            epochs: 8,
            batch_size: 16,
            adam: AdamConfig::with_lr(0.005),
            spurious_rate: 0.15,
            init_seed: 31,
            seed: 37,
            bi_encoder: BiEncoderConfig {
                schedule: vec!["hard".into(), "hard".into()],
                seed: 41,
                ..Default::default()
            },
        }
    }
}

/// A mention with its target: an entity id, NIL or ERROR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledMention {
    pub context: MentionContext,
    pub gold: String,
}

/// `rate × (gold mention count)` random word n-grams (1–3 tokens) that
/// overlap neither a gold mention nor each other, per utterance.
pub fn spurious_spans(utterances: &[Utterance], rate: f64, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); utterances.len()];
    let gold_total: usize = utterances.iter().map(|u| u.mentions.len()).sum();
    let target = (rate.max(0.0) * gold_total as f64).round() as usize;
    if utterances.is_empty() || target == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let overlaps = |a: (usize, usize), b: (usize, usize)| a.0 < b.1 && b.0 < a.1;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target && attempts < target * 50 {
        attempts += 1;
        let i = rng.gen_range(0..utterances.len());
        let u = &utterances[i];
        let len = rng.gen_range(1..=3usize);
        if u.tokens.len() < len {
            continue;
        }
        let start = rng.gen_range(0..=u.tokens.len() - len);
        let span = (start, start + len);
        if u.spans().into_iter().any(|g| overlaps(g, span)) || out[i].iter().any(|&s| overlaps(s, span)) {
            continue;
        }
        out[i].push(span);
        placed += 1;
    }
    for spans in &mut out {
        spans.sort_unstable();
    }
    out
}

/// Gold mentions with their ids (NIL included), plus spurious ERROR spans
/// in track 1.
pub fn training_mentions(utterances: &[Utterance], cfg: &LinkerConfig, mode: Mode) -> Result<Vec<LabeledMention>> {
    let mut out = Vec::new();
    for u in utterances {
        for m in &u.mentions {
            out.push(LabeledMention {
                context: MentionContext::from_utterance(u, m.start, m.end, cfg.window)?,
                gold: m.entity_id.clone(),
            });
        }
    }
    if mode == Mode::Track1 {
        let spurious = spurious_spans(utterances, cfg.spurious_rate, cfg.seed ^ 0x5e7e_c7ed);
        for (u, spans) in utterances.iter().zip(spurious) {
            for (s, e) in spans {
                out.push(LabeledMention {
                    context: MentionContext::from_utterance(u, s, e, cfg.window)?,
                    gold: ERROR_ID.to_owned(),
                });
            }
        }
    }
    Ok(out)
}

/// Interaction scorer: a one-hidden-layer MLP over standardized features,
/// plus a learned bias for each sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub mlp: Mlp,
    pub nil_bias: f64,
    pub error_bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl Ranker {
    fn new(hidden: usize, lists: &[CandidateList], rng: &mut ChaCha8Rng) -> Self {
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut sq = vec![0.0; NUM_FEATURES];
        let mut n = 0.0;
        for e in lists.iter().flat_map(|l| &l.entries) {
            for (k, &v) in e.features.iter().enumerate() {
                mean[k] += v;
                sq[k] += v * v;
            }
            n += 1.0;
        }
        let n = f64::max(n, 1.0);
        let scale = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = s / n - *m * *m;
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let shape = MlpShape {
            input: NUM_FEATURES,
            hidden,
            output: 1,
        };
        Ranker {
            mlp: Mlp::new(shape, rng),
            nil_bias: 0.0,
            error_bias: 0.0,
            feature_mean: mean,
            feature_scale: scale,
        }
    }

    fn input(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn bias(&self, entity_id: &str) -> f64 {
        match entity_id {
            NIL_ID => self.nil_bias,
            ERROR_ID => self.error_bias,
            _ => 0.0,
        }
    }

    pub fn score(&self, entity_id: &str, features: &[f64]) -> f64 {
        self.mlp.forward(&self.input(features)).output[0] + self.bias(entity_id)
    }

    /// Rank score of every entry of `list`, in list order.
    pub fn score_list(&self, list: &CandidateList) -> Vec<f64> {
        list.entries.iter().map(|e| self.score(&e.entity_id, &e.features)).collect()
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.mlp.params.clone();
        v.extend([self.nil_bias, self.error_bias]);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let n = self.mlp.params.len();
        self.mlp.params.copy_from_slice(&v[..n]);
        self.nil_bias = v[n];
        self.error_bias = v[n + 1];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linker {
    pub cfg: LinkerConfig,
    /// Track the ranker was trained for; only track-1 training sees ERROR.
    pub mode: Mode,
    pub encoder: BiEncoder,
    pub ranker: Ranker,
}

#[derive(Serialize, Deserialize)]
struct RankerHeader {
    cfg: LinkerConfig,
    mode: Mode,
    shape: MlpShape,
}

const MAGIC: &[u8; 8] = b"ELRNKPRM";

/// The linker's choice for one mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decision {
    Entity { entity_id: String, score: f64 },
    Nil { score: f64 },
    Dropped { score: f64 },
}

impl Decision {
    pub fn entity_id(&self) -> Option<&str> {
        match self {
            Decision::Entity { entity_id, .. } => Some(entity_id),
            Decision::Nil { .. } => Some(NIL_ID),
            Decision::Dropped { .. } => None,
        }
    }
}

/// Arg-max of `scores` over `list` (ties to the smaller id), mapped to a
/// decision. ERROR can only win in track-1 lists.
pub fn decide(list: &CandidateList, scores: &[f64]) -> Result<Decision> {
    if scores.len() != list.entries.len() || scores.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: list.entries.len(),
            actual: scores.len(),
        });
    }
    let best = (0..scores.len())
        .max_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then_with(|| list.entries[b].entity_id.cmp(&list.entries[a].entity_id))
        })
        .unwrap();
    let score = softmax(scores)[best];
    Ok(match list.entries[best].entity_id.as_str() {
        NIL_ID => Decision::Nil { score },
        ERROR_ID => Decision::Dropped { score },
        id => Decision::Entity {
            entity_id: id.to_owned(),
            score,
        },
    })
}

impl Linker {
    pub fn index(&self, kb: &KbStore) -> Result<VectorIndex> {
        self.encoder.index(kb)
    }

    /// Candidate lists for `mentions`; `golds` forces the gold entry in.
    pub fn candidate_lists(
        &self,
        mentions: &[MentionContext],
        golds: Option<&[&str]>,
        kb: &KbStore,
        index: &VectorIndex,
        mode: Mode,
    ) -> Result<Vec<CandidateList>> {
        let vocab = NameVocabulary::from_kb(kb);
        mentions
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let gold = golds.map(|g| g[i]);
                let opts = ListOptions {
                    k: self.cfg.top_k,
                    mode,
                    mention_repeats: self.cfg.mention_repeats,
                };
                retrieve_for_mention(m, &self.encoder.sentence, index, kb, &vocab, opts, gold)
            })
            .collect()
    }

    /// Decision for one list. In track 2 the ERROR sentinel is ignored even
    /// when the list carries one.
    pub fn disambiguate(&self, list: &CandidateList, mode: Mode) -> Result<Decision> {
        let list = if mode == Mode::Track2 { &list.without_error() } else { list };
        decide(list, &self.ranker.score_list(list))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.encoder.save(dir, "linker")?;
        let header = RankerHeader {
            cfg: self.cfg.clone(),
            mode: self.mode,
            shape: self.ranker.mlp.shape,
        };
        save_blob(
            &dir.join("linker_ranker.bin"),
            MAGIC,
            &header,
            &[
                &self.ranker.mlp.params,
                &[self.ranker.nil_bias, self.ranker.error_bias],
                &self.ranker.feature_mean,
                &self.ranker.feature_scale,
            ],
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("linker_ranker.bin");
        let (h, arrays): (RankerHeader, _) = load_blob(&path, MAGIC)?;
        let bad = || Error::BadParamFile(format!("{}: unexpected array layout", path.display()));
        let [params, biases, mean, scale]: [Vec<f64>; 4] = arrays.try_into().map_err(|_| bad())?;
        if params.len() != h.shape.num_params()
            || biases.len() != 2
            || mean.len() != NUM_FEATURES
            || scale.len() != NUM_FEATURES
        {
            return Err(bad());
        }
        Ok(Linker {
            cfg: h.cfg,
            mode: h.mode,
            encoder: BiEncoder::load(dir, "linker")?,
            ranker: Ranker {
                mlp: Mlp { shape: h.shape, params },
                nil_bias: biases[0],
                error_bias: biases[1],
                feature_mean: mean,
                feature_scale: scale,
            },
        })
    }
}

/// Mention-side bi-encoder training: NCE with the configured negative
/// schedule over mention windows.
pub fn train_mention_encoder(mentions: &[LabeledMention], kb: &KbStore, cfg: &LinkerConfig) -> Result<BiEncoder> {
    let queries: Vec<TrainQuery> = mentions
        .iter()
        .filter_map(|m| {
            let row = kb.index_of(&m.gold).filter(|&r| r < kb.num_regular())?;
            Some(TrainQuery {
                tokens: m.context.query_tokens(cfg.mention_repeats),
                gold_rows: vec![row],
            })
        })
        .collect();
    let mut model = BiEncoder::init(&cfg.bi_encoder)?;
    if !cfg.bi_encoder.schedule.is_empty() && !queries.is_empty() {
        train_bi_encoder(&mut model, &queries, kb, &cfg.bi_encoder, None)?;
    }
    Ok(model)
}

/// Trains the ranker on fixed candidate lists (gold present in each).
pub fn train_ranker(lists: &[CandidateList], cfg: &LinkerConfig) -> Result<(Ranker, Vec<LinkerEpochLog>)> {
    let lists: Vec<&CandidateList> = lists.iter().filter(|l| l.gold.is_some()).collect();
    if lists.is_empty() {
        return Err(Error::InvalidArgument("no training mentions with a reachable gold entry".into()));
    }
    let sampler = candidate_sampler_registry().create(&cfg.sampler, &cfg.sampler_params)?;
    let loss_fn = ranking_loss_registry().create_default(&cfg.loss)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let owned: Vec<CandidateList> = lists.iter().map(|l| (*l).clone()).collect();
    let mut ranker = Ranker::new(cfg.hidden, &owned, &mut init_rng);
    let inputs: Vec<Vec<Vec<f64>>> = lists
        .iter()
        .map(|l| l.entries.iter().map(|e| ranker.input(&e.features)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = ranker.mlp.params.len() + 2;
    let mut opt = DenseAdam::new(n_params);
    let mut order: Vec<usize> = (0..lists.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let scale = cfg.bi_encoder.score_scale;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grad = vec![0.0; n_params];
            let n_mlp = ranker.mlp.params.len();
            for &li in batch {
                let list = lists[li];
                let real: Vec<usize> = list.real_entries().collect();
                let gold = list.gold.unwrap();
                let gold_real = real.iter().position(|&i| i == gold);
                let logits: Vec<f64> = real.iter().map(|&i| scale * list.entries[i].retrieval_score).collect();
                let picked = sampler.sample(&logits, gold_real, cfg.list_size, &mut rng)?;
                let mut positions: Vec<usize> = picked.iter().map(|&k| real[k]).collect();
                positions.extend(list.entries.iter().enumerate().filter(|(_, e)| e.is_sentinel()).map(|(i, _)| i));
                let gold_pos = positions.iter().position(|&p| p == gold).unwrap();
                let caches: Vec<_> = positions.iter().map(|&p| ranker.mlp.forward(&inputs[li][p])).collect();
                let scores: Vec<f64> = positions
                    .iter()
                    .zip(&caches)
                    .map(|(&p, c)| c.output[0] + ranker.bias(&list.entries[p].entity_id))
                    .collect();
                let (loss, g) = loss_fn.loss(&scores, gold_pos)?;
                total += loss;
                for ((&p, c), gs) in positions.iter().zip(&caches).zip(&g) {
                    ranker.mlp.backward(&inputs[li][p], c, &[*gs], &mut grad[..n_mlp], None);
                    match list.entries[p].entity_id.as_str() {
                        NIL_ID => grad[n_mlp] += gs,
                        ERROR_ID => grad[n_mlp + 1] += gs,
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let mut flat = ranker.flat();
            opt.step(&mut flat, &grad, &cfg.adam).map_err(|e| match e {
                Error::NonFinite(m) => Error::Diverged(format!("ranker epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
            ranker.set_flat(&flat);
        }
        let mean_loss = total / lists.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!("ranker epoch {epoch}: loss {mean_loss}")));
        }
        log::info!("ranker epoch {}: mean loss {:.4}", epoch + 1, mean_loss);
        logs.push(LinkerEpochLog {
            epoch: epoch + 1,
            mean_loss,
        });
    }
    Ok((ranker, logs))
}

pub struct TrainedLinker {
    pub linker: Linker,
    pub history: Vec<LinkerEpochLog>,
}

/// Full stage-3 training: mention encoder, then candidate lists, then ranker.
pub fn train_linker(train: &[Utterance], kb: &KbStore, cfg: &LinkerConfig, mode: Mode) -> Result<TrainedLinker> {
    let mentions = training_mentions(train, cfg, mode)?;
    if mentions.is_empty() {
        return Err(Error::InvalidArgument("no training mentions".into()));
    }
    let encoder = train_mention_encoder(&mentions, kb, cfg)?;
    let mut linker = Linker {
        cfg: cfg.clone(),
        mode,
        encoder,
        ranker: Ranker {
            mlp: Mlp {
                shape: MlpShape { input: NUM_FEATURES, hidden: cfg.hidden, output: 1 },
                params: Vec::new(),
            },
            nil_bias: 0.0,
            error_bias: 0.0,
            feature_mean: Vec::new(),
            feature_scale: Vec::new(),
        },
    };
    let index = linker.index(kb)?;
    let contexts: Vec<MentionContext> = mentions.iter().map(|m| m.context.clone()).collect();
    let golds: Vec<&str> = mentions.iter().map(|m| m.gold.as_str()).collect();
    let lists = linker.candidate_lists(&contexts, Some(&golds), kb, &index, mode)?;
    let (ranker, history) = train_ranker(&lists, cfg)?;
    linker.ranker = ranker;
    Ok(TrainedLinker { linker, history })
}

/// One surviving mention of the linking output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
    pub score: f64,
}

/// A mention removed by the ERROR sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub reason: String,
}
