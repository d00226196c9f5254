use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crf::{crf_nll, viterbi, CrfParams, Emissions};
use super::features::{knowledge_features, KnowledgeFeatures};
use crate::corpus::{from_bio, to_bio, Tag, TagSequence, Utterance};
use crate::encoder::{featurize, FeatureCounts, FeatureSpec, TextEncoder};
use crate::error::{Error, Result};
use crate::kb::KbStore;
use crate::metrics::{span_f1, Prf};
use crate::mlp::{Mlp, MlpShape};
use crate::optim::{AdamConfig, DenseAdam, RowAdam};
use crate::persist::{load_blob, save_blob};
use crate::retrieval::{CandidateSet, VectorIndex};

const NUM_TAGS: usize = 3;
/// Per-position context scalars: recurrence, phrase recurrence, affinity.
const CONTEXT_SCALARS: usize = 3;
/// Per-position candidate scalars, see [`candidate_scalars`].
const CANDIDATE_SCALARS: usize = 6;
const WINDOW: [isize; 3] = [-1, 0, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerConfig {
    pub top_k_candidates: usize,
    pub token_dim: usize,
    pub token_features: FeatureSpec,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub init_seed: u64,
    pub seed: u64,
    pub use_context: bool,
    pub use_candidates: bool,
    /// Feed the raw context vector to the scorer next to the derived
    /// context scalars. Off by default: on small corpora it mostly adds
    /// capacity to overfit.
    pub context_vector_input: bool,
    /// Probability of hiding each gold entity from a training sentence's
    /// candidate list, so that training sees retrieval misses at roughly the
    /// rate held-out data does.
    pub gold_candidate_dropout: f64,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig {
            top_k_candidates: 16,
            token_dim: 16,
            token_features: FeatureSpec {
                ngram_sizes: vec![2, 3, 4],
                buckets: 1 << 16,
                seed: 0x7a6e_0001,
                ..Default::default()
            },
            hidden: 32,
            epochs: 2,
            batch_size: 8,
            adam: AdamConfig::with_lr(0.01),
            init_seed: 23,
            seed: 29,
            use_context: true,
            use_candidates: true,
            context_vector_input: false,
            gold_candidate_dropout: 0.6,
        }
    }
}

/// Everything the recognizer reads for one utterance, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct NerInput {
    pub token_features: Vec<FeatureCounts>,
    pub knowledge: KnowledgeFeatures,
}

pub fn prepare_input(
    u: &Utterance,
    candidates: &CandidateSet,
    kb: &KbStore,
    encoder: &dyn TextEncoder,
    index: &VectorIndex,
    cfg: &NerConfig,
) -> Result<NerInput> {
    Ok(NerInput {
        token_features: u.tokens.iter().map(|t| featurize(&cfg.token_features, &[t])).collect(),
        knowledge: knowledge_features(
            &u.tokens,
            &u.context(),
            candidates,
            kb,
            encoder,
            index,
            cfg.top_k_candidates,
        )?,
    })
}

pub fn prepare_inputs(
    utterances: &[Utterance],
    candidates: &[CandidateSet],
    kb: &KbStore,
    encoder: &dyn TextEncoder,
    index: &VectorIndex,
    cfg: &NerConfig,
) -> Result<Vec<NerInput>> {
    if utterances.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: utterances.len(),
            actual: candidates.len(),
        });
    }
    utterances
        .iter()
        .zip(candidates)
        .map(|(u, c)| prepare_input(u, c, kb, encoder, index, cfg))
        .collect()
}

/// Training-time copy of `candidates` with each gold entity hidden with
/// probability `cfg.gold_candidate_dropout`.
pub fn drop_gold_candidates(
    candidates: &[CandidateSet],
    utterances: &[Utterance],
    cfg: &NerConfig,
) -> Vec<CandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0d70_9c4d);
    let p = cfg.gold_candidate_dropout.clamp(0.0, 1.0);
    candidates
        .iter()
        .zip(utterances)
        .map(|(c, u)| {
            let gold: Vec<&str> = u.gold_entities();
            let mut out = c.clone();
            if p > 0.0 {
                out.entries.retain(|e| !(gold.contains(&e.entity_id.as_str()) && rng.gen_bool(p)));
            }
            out
        })
        .collect()
}

fn candidate_scalars(k: &KnowledgeFeatures, i: usize) -> [f64; CANDIDATE_SCALARS] {
    let t = &k.tokens[i];
    [
        t.similarity,
        f64::from(u8::from(t.alias_match)),
        f64::from(u8::from(t.match_begin)),
        t.match_rank.map_or(0.0, |r| 1.0 / (1.0 + r as f64)),
        t.soft_match,
        t.soft_begin,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerModel {
    pub cfg: NerConfig,
    pub context_dim: usize,
    /// Hashed token-feature table, `buckets × token_dim`.
    pub token_table: Vec<f64>,
    pub mlp: Mlp,
    pub crf: CrfParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: NerConfig,
    context_dim: usize,
    shape: MlpShape,
}

const MAGIC: &[u8; 8] = b"ELNERPRM";

impl NerModel {
    pub fn input_dim(cfg: &NerConfig, context_dim: usize) -> usize {
        let ctx = if cfg.context_vector_input { context_dim } else { 0 };
        WINDOW.len() * (cfg.token_dim + CONTEXT_SCALARS + CANDIDATE_SCALARS) + ctx + 2
    }

    pub fn new(cfg: NerConfig, context_dim: usize) -> Result<Self> {
        cfg.token_features.validate()?;
        if cfg.token_dim == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidArgument("token_dim and hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let n = cfg.token_features.buckets as usize * cfg.token_dim;
        let token_table = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let shape = MlpShape {
            input: Self::input_dim(&cfg, context_dim),
            hidden: cfg.hidden,
            output: NUM_TAGS,
        };
        let mlp = Mlp::new(shape, &mut rng);
        Ok(NerModel {
            cfg,
            context_dim,
            token_table,
            mlp,
            crf: CrfParams::zeros(NUM_TAGS),
        })
    }

    fn token_vector(&self, feats: &FeatureCounts) -> Vec<f64> {
        let w = self.cfg.token_dim;
        let mut v = vec![0.0; w];
        let total = feats.total();
        if total == 0 {
            return v;
        }
        for &(f, c) in feats.entries() {
            let row = &self.token_table[f as usize * w..(f as usize + 1) * w];
            for (a, b) in v.iter_mut().zip(row) {
                *a += c as f64 * b;
            }
        }
        let inv = 1.0 / total as f64;
        v.iter_mut().for_each(|a| *a *= inv);
        v
    }

    /// Scorer input of every token, honouring the ablation switches.
    fn token_inputs(&self, input: &NerInput) -> Vec<Vec<f64>> {
        let l = input.token_features.len();
        let k = &input.knowledge;
        let tok_vecs: Vec<Vec<f64>> = input.token_features.iter().map(|f| self.token_vector(f)).collect();
        let w = self.cfg.token_dim;
        (0..l)
            .map(|i| {
                let mut x = Vec::with_capacity(self.mlp.shape.input);
                for off in WINDOW {
                    match position(i, off, l) {
                        Some(j) => x.extend_from_slice(&tok_vecs[j]),
                        None => x.extend(std::iter::repeat_n(0.0, w)),
                    }
                }
                if self.cfg.context_vector_input {
                    if self.cfg.use_context {
                        x.extend_from_slice(&k.context_vector);
                    } else {
                        x.extend(std::iter::repeat_n(0.0, self.context_dim));
                    }
                }
                for off in WINDOW {
                    match position(i, off, l).filter(|_| self.cfg.use_context) {
                        Some(j) => x.extend([k.recurrence[j], k.phrase_recurrence[j], k.affinity[j]]),
                        None => x.extend([0.0; CONTEXT_SCALARS]),
                    }
                }
                for off in WINDOW {
                    match position(i, off, l).filter(|_| self.cfg.use_candidates) {
                        Some(j) => x.extend(candidate_scalars(k, j)),
                        None => x.extend([0.0; CANDIDATE_SCALARS]),
                    }
                }
                x.push(f64::from(u8::from(i == 0)));
                x.push(f64::from(u8::from(i + 1 == l)));
                x
            })
            .collect()
    }

    pub fn emissions(&self, input: &NerInput) -> Result<Emissions> {
        if input.knowledge.context_vector.len() != self.context_dim {
            return Err(Error::DimensionMismatch {
                expected: self.context_dim,
                actual: input.knowledge.context_vector.len(),
            });
        }
        let scores = self
            .token_inputs(input)
            .iter()
            .flat_map(|x| self.mlp.forward(x).output)
            .collect();
        Emissions::new(NUM_TAGS, scores)
    }

    pub fn predict_tags(&self, input: &NerInput) -> Result<TagSequence> {
        if input.token_features.is_empty() {
            return Ok(Vec::new());
        }
        viterbi(&self.emissions(input)?, &self.crf)
    }

    pub fn predict(&self, input: &NerInput) -> Result<Vec<(usize, usize)>> {
        Ok(from_bio(&self.predict_tags(input)?))
    }

    /// Mean NLL of a batch and its gradients: `(loss, dense grads, row grads)`.
    /// Dense layout is MLP parameters followed by CRF parameters.
    fn batch_gradient(
        &self,
        batch: &[(&NerInput, &[Tag])],
    ) -> Result<(f64, Vec<f64>, HashMap<u32, Vec<f64>>)> {
        let n_mlp = self.mlp.shape.num_params();
        let mut dense = vec![0.0; n_mlp + self.crf.num_params()];
        let mut rows: HashMap<u32, Vec<f64>> = HashMap::new();
        let mut loss = 0.0;
        let w = self.cfg.token_dim;
        for (input, gold) in batch {
            let l = gold.len();
            if l == 0 {
                continue;
            }
            let xs = self.token_inputs(input);
            let caches: Vec<_> = xs.iter().map(|x| self.mlp.forward(x)).collect();
            let em = Emissions::new(NUM_TAGS, caches.iter().flat_map(|c| c.output.iter().copied()).collect())?;
            let nll = crf_nll(&em, &self.crf, gold)?;
            loss += nll.loss;
            for (g, pg) in dense[n_mlp..].iter_mut().zip(&nll.param_grad) {
                *g += pg;
            }
            let mut tok_grads = vec![vec![0.0; w]; l];
            let mut gx = vec![0.0; self.mlp.shape.input];
            for i in 0..l {
                gx.iter_mut().for_each(|v| *v = 0.0);
                let go = &nll.emission_grad[i * NUM_TAGS..(i + 1) * NUM_TAGS];
                self.mlp.backward(&xs[i], &caches[i], go, &mut dense[..n_mlp], Some(&mut gx));
                for (slot, off) in WINDOW.iter().enumerate() {
                    if let Some(j) = position(i, *off, l) {
                        for (a, b) in tok_grads[j].iter_mut().zip(&gx[slot * w..(slot + 1) * w]) {
                            *a += b;
                        }
                    }
                }
            }
            for (feats, g) in input.token_features.iter().zip(&tok_grads) {
                let total = feats.total();
                if total == 0 {
                    continue;
                }
                for &(f, c) in feats.entries() {
                    let k = c as f64 / total as f64;
                    let row = rows.entry(f).or_insert_with(|| vec![0.0; w]);
                    for (r, gi) in row.iter_mut().zip(g) {
                        *r += k * gi;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len().max(1) as f64;
        dense.iter_mut().for_each(|g| *g *= inv);
        rows.values_mut().for_each(|r| r.iter_mut().for_each(|g| *g *= inv));
        Ok((loss * inv, dense, rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            cfg: self.cfg.clone(),
            context_dim: self.context_dim,
            shape: self.mlp.shape,
        };
        save_blob(path.as_ref(), MAGIC, &header, &[&self.token_table, &self.mlp.params, &self.crf.flat()])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, arrays): (Header, _) = load_blob(path, MAGIC)?;
        let [table, mlp, crf]: [Vec<f64>; 3] = arrays
            .try_into()
            .map_err(|_| Error::BadParamFile(format!("{}: expected 3 arrays", path.display())))?;
        let mut model = NerModel {
            token_table: table,
            mlp: Mlp { shape: h.shape, params: mlp },
            crf: CrfParams::zeros(NUM_TAGS),
            context_dim: h.context_dim,
            cfg: h.cfg,
        };
        if model.token_table.len() != model.cfg.token_features.buckets as usize * model.cfg.token_dim
            || model.mlp.params.len() != model.mlp.shape.num_params()
            || crf.len() != model.crf.num_params()
        {
            return Err(Error::BadParamFile(format!("{}: array sizes disagree with header", path.display())));
        }
        model.crf.set_flat(&crf);
        Ok(model)
    }
}

fn position(i: usize, off: isize, l: usize) -> Option<usize> {
    let j = i as isize + off;
    (0..l as isize).contains(&j).then_some(j as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains emission scorer and CRF jointly on mean CRF NLL.
pub fn train_ner(
    inputs: &[NerInput],
    utterances: &[Utterance],
    context_dim: usize,
    cfg: &NerConfig,
) -> Result<(NerModel, Vec<NerEpochLog>)> {
    if inputs.len() != utterances.len() {
        return Err(Error::DimensionMismatch {
            expected: utterances.len(),
            actual: inputs.len(),
        });
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no training utterances".into()));
    }
    let mut model = NerModel::new(cfg.clone(), context_dim)?;
    let golds: Vec<TagSequence> = utterances.iter().map(to_bio).collect();
    let n_mlp = model.mlp.shape.num_params();
    let mut dense_opt = DenseAdam::new(n_mlp + model.crf.num_params());
    let mut row_opt = RowAdam::new(cfg.token_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<(&NerInput, &[Tag])> = chunk.iter().map(|&i| (&inputs[i], golds[i].as_slice())).collect();
            let (loss, dense, rows) = model.batch_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("recognizer epoch {epoch}, step {step}: loss {loss}")));
            }
            let mut flat = model.mlp.params.clone();
            flat.extend(model.crf.flat());
            dense_opt.step(&mut flat, &dense, &cfg.adam).map_err(|e| diverged(e, epoch, step))?;
            model.mlp.params.copy_from_slice(&flat[..n_mlp]);
            model.crf.set_flat(&flat[n_mlp..]);
            row_opt
                .step(&mut model.token_table, &rows, &cfg.adam)
                .map_err(|e| diverged(e, epoch, step))?;
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches.max(1) as f64;
        log::info!("recognizer epoch {}: mean loss {:.4}", epoch + 1, mean_loss);
        logs.push(NerEpochLog {
            epoch: epoch + 1,
            mean_loss,
        });
    }
    Ok((model, logs))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged(format!("recognizer epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

/// Span P/R/F1 of the model on prepared inputs against gold mentions.
pub fn evaluate_ner(model: &NerModel, inputs: &[NerInput], utterances: &[Utterance]) -> Result<Prf> {
    let pred = inputs.iter().map(|i| model.predict(i)).collect::<Result<Vec<_>>>()?;
    let gold: Vec<_> = utterances.iter().map(Utterance::spans).collect();
    Ok(span_f1(&pred, &gold))
}

/// One line of the recognizer output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub spans: Vec<(usize, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ner::features::TokenKnowledge;

    fn tiny_cfg() -> NerConfig {
        NerConfig {
            context_vector_input: true,
            token_dim: 3,
            hidden: 4,
            token_features: FeatureSpec {
                ngram_sizes: vec![3],
                buckets: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_input(words: &[&str], cfg: &NerConfig, ctx_dim: usize, seed: u64) -> NerInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = words.len();
        NerInput {
            token_features: words.iter().map(|w| featurize(&cfg.token_features, &[w])).collect(),
            knowledge: KnowledgeFeatures {
                context_vector: (0..ctx_dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                recurrence: (0..l).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
                phrase_recurrence: (0..l).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
                affinity: (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                tokens: (0..l)
                    .map(|_| TokenKnowledge {
                        similarity: rng.gen_range(0.0..1.0),
                        alias_match: rng.gen_bool(0.5),
                        match_rank: Some(rng.gen_range(0..16)),
                        match_begin: rng.gen_bool(0.3),
                        soft_match: rng.gen_range(0.0..1.0),
                        soft_begin: rng.gen_range(0.0..1.0),
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let model = NerModel::new(cfg.clone(), 4).unwrap();
        let input = tiny_input(&["alpha", "beta", "gamma", "delta"], &cfg, 4, 1);
        let gold = [Tag::O, Tag::B, Tag::I, Tag::O];
        let n_mlp = model.mlp.shape.num_params();
        let (_, dense, rows) = model.batch_gradient(&[(&input, &gold)]).unwrap();
        let mut touched: Vec<u32> = rows.keys().copied().collect();
        touched.sort_unstable();
        let w = cfg.token_dim;
        let mut x0 = model.mlp.params.clone();
        x0.extend(model.crf.flat());
        for &r in &touched {
            x0.extend_from_slice(&model.token_table[r as usize * w..(r as usize + 1) * w]);
        }
        let mut analytic = dense.clone();
        for r in &touched {
            analytic.extend_from_slice(&rows[r]);
        }
        let f = |x: &[f64]| {
            let mut m = model.clone();
            m.mlp.params.copy_from_slice(&x[..n_mlp]);
            m.crf.set_flat(&x[n_mlp..n_mlp + 15]);
            for (k, &r) in touched.iter().enumerate() {
                let src = &x[n_mlp + 15 + k * w..n_mlp + 15 + (k + 1) * w];
                m.token_table[r as usize * w..(r as usize + 1) * w].copy_from_slice(src);
            }
            let (loss, _, _) = m.batch_gradient(&[(&input, &gold)]).unwrap();
            (loss, analytic.clone())
        };
        let report = grad_check(f, &x0, 1e-5, 1e-4, None, 0);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn ablation_zeroes_inputs() {
        let cfg = NerConfig { use_candidates: false, use_context: false, ..tiny_cfg() };
        let model = NerModel::new(cfg.clone(), 4).unwrap();
        let input = tiny_input(&["a", "b"], &cfg, 4, 2);
        let xs = model.token_inputs(&input);
        let tail = &xs[0][3 * cfg.token_dim..xs[0].len() - 2];
        assert!(tail.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_learns_a_marker() {
        let cfg = NerConfig { epochs: 40, batch_size: 1, adam: AdamConfig::with_lr(0.05), ..tiny_cfg() };
        let mk = |words: &str, spans: &[(usize, usize)]| Utterance {
            doc_id: "d".into(),
            sent_index: 0,
            tokens: words.split(' ').map(str::to_owned).collect(),
            prev_context: vec![],
            next_context: vec![],
            mentions: spans
                .iter()
                .map(|&(s, e)| crate::corpus::MentionSpan { start: s, end: e, entity_id: "Q".into() })
                .collect(),
        };
        let utts = vec![
            mk("we saw zorbax today", &[(2, 3)]),
            mk("zorbax was there", &[(0, 1)]),
            mk("nothing here at all", &[]),
            mk("they met zorbax", &[(2, 3)]),
        ];
        let inputs: Vec<NerInput> = utts
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mut inp = tiny_input(&u.tokens.iter().map(String::as_str).collect::<Vec<_>>(), &cfg, 4, i as u64);
                inp.knowledge.tokens.iter_mut().for_each(|t| *t = TokenKnowledge::default());
                inp
            })
            .collect();
        let (a, logs) = train_ner(&inputs, &utts, 4, &cfg).unwrap();
        let (b, _) = train_ner(&inputs, &utts, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(logs.last().unwrap().mean_loss < logs[0].mean_loss);
        let prf = evaluate_ner(&a, &inputs, &utts).unwrap();
        assert_eq!(prf.f1, 1.0);
    }

    #[test]
    fn gold_dropout_only_removes_gold() {
        let u = Utterance {
            doc_id: "d".into(),
            sent_index: 0,
            tokens: vec!["x".into()],
            prev_context: vec![],
            next_context: vec![],
            mentions: vec![crate::corpus::MentionSpan { start: 0, end: 1, entity_id: "G".into() }],
        };
        let cand = |id: &str, row| crate::retrieval::Candidate { entity_id: id.into(), row, score: 0.0 };
        let set = CandidateSet { query: "q".into(), entries: vec![cand("A", 0), cand("G", 1), cand("B", 2)] };
        let all = NerConfig { gold_candidate_dropout: 1.0, ..tiny_cfg() };
        let out = drop_gold_candidates(&[set.clone()], &[u.clone()], &all);
        let ids: Vec<&str> = out[0].entries.iter().map(|e| e.entity_id.as_str()).collect();
        assert_eq!(ids, ["A", "B"]);
        let none = NerConfig { gold_candidate_dropout: 0.0, ..tiny_cfg() };
        assert_eq!(drop_gold_candidates(&[set.clone()], &[u], &none)[0], set);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny_cfg();
        let model = NerModel::new(cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ner.bin");
        model.save(&p).unwrap();
        assert_eq!(NerModel::load(&p).unwrap(), model);
    }
}
