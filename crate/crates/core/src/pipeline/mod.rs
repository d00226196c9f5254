//! End-to-end orchestration: stage training, the two evaluation tracks,
//! intermediate artifacts and reports.
//!
//! Model directory layout: `retriever_{sentence,entity}.bin`,
//! `retriever_index.bin`, `ner.bin`, `linker_{sentence,entity,ranker}.bin`,
//! plus a `*_history.json` per trained stage. Output directory: JSONL stage
//! artifacts, `report_*.{json,txt}` and `timings.json`.

mod config;
mod report;

use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use config::{file_digest, Paths, PipelineConfig, PATH_OVERRIDES};
pub use report::{InputDigests, MetricsReport, StageTiming, Timings, Track1Metrics, Track2Metrics};

use crate::corpus::{from_bio, load_corpus, split_train_valid, Utterance};
use crate::encoder::TextEncoder;
use crate::ensemble::{hybrid_rank, vote, EnsembleManifest, FusionWeights, VoteConfig};
use crate::error::{Error, Result};
use crate::kb::{load_kb, KbStore, Mode, ERROR_ID, NIL_ID};
use crate::linker::{train_linker, CandidateList, Decision, DroppedRecord, LinkRecord, Linker, MentionContext};
use crate::metrics::{span_f1, Prf};
use crate::ner::{drop_gold_candidates, prepare_input, prepare_inputs, train_ner, NerModel, SpanRecord};
use crate::retrieval::{recall_at_k, retrieve_candidates, train_retriever, BiEncoder, CandidateSet, VectorIndex};
use crate::synth::{synth_generate, SynthConfig};

const RETRIEVER_PREFIX: &str = "retriever";
const RETRIEVER_INDEX: &str = "retriever_index.bin";
const NER_FILE: &str = "ner.bin";

/// Output file names inside `out_dir`.
pub mod artifacts {
    pub const CANDIDATES: &str = "candidates.jsonl";
    pub const SPANS: &str = "spans.jsonl";
    pub const TRACK1_LINKS: &str = "track1_links.jsonl";
    pub const TRACK1_DROPPED: &str = "track1_dropped.jsonl";
    pub const TRACK2_LINKS: &str = "track2_links.jsonl";
    pub const TIMINGS: &str = "timings.json";
}

struct Data {
    kb: KbStore,
    train: Vec<Utterance>,
    eval: Vec<Utterance>,
}

struct Retriever {
    model: BiEncoder,
    index: VectorIndex,
}

/// Recognizers plus the vote that merges them.
struct Recognizers {
    models: Vec<NerModel>,
    vote: VoteConfig,
}

/// Linkers plus fusion weights; the first linker supplies candidate lists.
struct Linkers {
    models: Vec<Linker>,
    fusion: Option<FusionWeights>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    timings: RefCell<Timings>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Tags a lower-level failure with the stage it happened in.
fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::stage(stage, other),
    })
}

/// Arg-max of a fused ordering as a linker decision.
fn fused_decision(entity_id: &str, score: f64) -> Decision {
    match entity_id {
        NIL_ID => Decision::Nil { score },
        ERROR_ID => Decision::Dropped { score },
        id => Decision::Entity {
            entity_id: id.to_owned(),
            score,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KbSummary {
    pub entities: usize,
    pub aliases: usize,
    pub digest: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            timings: RefCell::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Stage timings recorded so far by this pipeline.
    pub fn timings(&self) -> Timings {
        self.timings.borrow().clone()
    }

    fn timed<T>(&self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let secs = t.elapsed().as_secs_f64();
        log::info!("{stage}: {secs:.1}s");
        self.timings.borrow_mut().record(stage, secs);
        Ok(out)
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.cfg.paths.model_dir.join(name)
    }

    fn require_input(&self, path: &Path, what: &str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::stage("input", format!("{what} file {} does not exist", path.display())))
        }
    }

    fn load_kb(&self, mode: Mode) -> Result<KbStore> {
        self.require_input(&self.cfg.paths.kb, "KB")?;
        in_stage("kb", load_kb(&self.cfg.paths.kb, mode))
    }

    fn data(&self, mode: Mode) -> Result<Data> {
        let kb = self.load_kb(mode)?;
        self.require_input(&self.cfg.paths.corpus, "corpus")?;
        let corpus = in_stage("corpus", load_corpus(&self.cfg.paths.corpus, &kb))?;
        let (train, eval) = match &self.cfg.paths.test {
            Some(test) => {
                self.require_input(test, "test corpus")?;
                (corpus.utterances, in_stage("corpus", load_corpus(test, &kb))?.utterances)
            }
            None => in_stage("corpus", split_train_valid(&corpus.utterances, self.cfg.split_seed))?,
        };
        Ok(Data { kb, train, eval })
    }

    fn digests(&self) -> Result<InputDigests> {
        let p = &self.cfg.paths;
        Ok(InputDigests {
            kb: file_digest(&p.kb)?,
            corpus: file_digest(&p.corpus)?,
            test: p.test.as_deref().map(file_digest).transpose()?,
        })
    }

    fn new_report(&self, mode: Mode, eval_utterances: usize) -> Result<MetricsReport> {
        Ok(MetricsReport::new(self.cfg.fingerprint()?, self.digests()?, mode, eval_utterances))
    }

    /// Writes a synthetic KB and corpus to the configured paths.
    pub fn synth(&self, cfg: &SynthConfig) -> Result<()> {
        let data = synth_generate(cfg)?;
        for p in [&self.cfg.paths.kb, &self.cfg.paths.corpus] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        data.write(&self.cfg.paths.kb, &self.cfg.paths.corpus)
    }

    /// Loads and validates the KB, recording a summary in the model directory.
    pub fn build_kb(&self) -> Result<KbSummary> {
        let kb = self.load_kb(self.cfg.mode)?;
        let summary = KbSummary {
            entities: kb.num_regular(),
            aliases: kb.regular().iter().map(|e| e.aliases.len()).sum(),
            digest: file_digest(&self.cfg.paths.kb)?,
        };
        write_json(&self.model_path("kb_summary.json"), &summary)?;
        Ok(summary)
    }

    pub fn train_retriever(&self) -> Result<()> {
        let data = self.data(self.cfg.mode)?;
        let trained = self.timed("train-retriever", || {
            in_stage("retrieval", train_retriever(&data.train, &data.kb, &self.cfg.retriever, Some(&data.eval)))
        })?;
        let dir = &self.cfg.paths.model_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trained.model.save(dir, RETRIEVER_PREFIX)?;
        trained.model.index(&data.kb)?.save(self.model_path(RETRIEVER_INDEX))?;
        write_json(&self.model_path("retriever_history.json"), &trained.history)
    }

    fn load_retriever(&self) -> Result<Retriever> {
        let index_path = self.model_path(RETRIEVER_INDEX);
        if !index_path.is_file() {
            if self.cfg.train_if_missing {
                self.train_retriever()?;
            } else {
                return Err(Error::stage(
                    "retrieval",
                    format!("no trained retriever in {}; run train-retriever first", self.cfg.paths.model_dir.display()),
                ));
            }
        }
        let model = in_stage("retrieval", BiEncoder::load(&self.cfg.paths.model_dir, RETRIEVER_PREFIX))?;
        let index = in_stage("retrieval", VectorIndex::load(&index_path))?;
        if index.fingerprint != model.entity.fingerprint() {
            return Err(Error::stage("retrieval", "entity index was built by a different entity encoder"));
        }
        Ok(Retriever { model, index })
    }

    /// Trains one recognizer. `seed` replaces both configured seeds and
    /// `output` the default parameter file, for building ensemble members.
    pub fn train_ner(&self, output: Option<&Path>, seed: Option<u64>) -> Result<()> {
        let data = self.data(self.cfg.mode)?;
        let retriever = self.load_retriever()?;
        let mut cfg = self.cfg.ner.clone();
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.init_seed = s.wrapping_add(1);
        }
        let (model, history) = self.timed("train-ner", || {
            in_stage("ner", (|| {
                let sentence = &retriever.model.sentence;
                let candidates = retrieve_candidates(sentence, &retriever.index, &data.train, self.cfg.retriever.top_k)?;
                let candidates = drop_gold_candidates(&candidates, &data.train, &cfg);
                let inputs = prepare_inputs(&data.train, &candidates, &data.kb, sentence, &retriever.index, &cfg)?;
                train_ner(&inputs, &data.train, sentence.dim(), &cfg)
            })())
        })?;
        let path = output.map_or_else(|| self.model_path(NER_FILE), Path::to_path_buf);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(&path)?;
        write_json(&path.with_extension("history.json"), &history)
    }

    /// Trains one linker for the configured mode; `output` is a directory.
    pub fn train_linker(&self, output: Option<&Path>, seed: Option<u64>) -> Result<()> {
        let data = self.data(self.cfg.mode)?;
        let mut cfg = self.cfg.linker.clone();
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.init_seed = s.wrapping_add(1);
        }
        let trained = self.timed("train-linker", || {
            in_stage("linker", train_linker(&data.train, &data.kb, &cfg, self.cfg.mode))
        })?;
        let dir = output.unwrap_or(&self.cfg.paths.model_dir);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trained.linker.save(dir)?;
        write_json(&dir.join("linker_history.json"), &trained.history)
    }

    /// Trains all three stages in order.
    pub fn train_all(&self) -> Result<()> {
        self.train_retriever()?;
        self.train_ner(None, None)?;
        self.train_linker(None, None)
    }

    fn manifest(&self) -> Result<Option<EnsembleManifest>> {
        self.cfg
            .paths
            .ensemble
            .as_deref()
            .map(|p| in_stage("ensemble", EnsembleManifest::load(p)))
            .transpose()
    }

    fn load_recognizers(&self) -> Result<Recognizers> {
        if let Some(m) = self.manifest()?.filter(|m| !m.ner_models.is_empty()) {
            let models = m
                .ner_models
                .iter()
                .map(|p| in_stage("ner", NerModel::load(p)))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Recognizers { models, vote: m.vote });
        }
        let path = self.model_path(NER_FILE);
        if !path.is_file() {
            if self.cfg.train_if_missing {
                self.train_ner(None, None)?;
            } else {
                return Err(Error::stage("ner", format!("no trained recognizer at {}; run train-ner first", path.display())));
            }
        }
        Ok(Recognizers {
            models: vec![in_stage("ner", NerModel::load(&path))?],
            vote: VoteConfig::default(),
        })
    }

    fn load_linkers(&self, mode: Mode) -> Result<Linkers> {
        let linkers = match self.manifest()?.filter(|m| !m.linker_models.is_empty()) {
            Some(m) => Linkers {
                models: m
                    .linker_models
                    .iter()
                    .map(|p| in_stage("linker", Linker::load(p)))
                    .collect::<Result<Vec<_>>>()?,
                fusion: Some(in_stage("ensemble", m.fusion_weights())?),
            },
            None => {
                if !self.model_path("linker_ranker.bin").is_file() {
                    if self.cfg.train_if_missing {
                        self.train_linker(None, None)?;
                    } else {
                        return Err(Error::stage(
                            "linker",
                            format!("no trained linker in {}; run train-linker first", self.cfg.paths.model_dir.display()),
                        ));
                    }
                }
                Linkers {
                    models: vec![in_stage("linker", Linker::load(&self.cfg.paths.model_dir))?],
                    fusion: None,
                }
            }
        };
        if mode == Mode::Track1 {
            if let Some(l) = linkers.models.iter().find(|l| l.mode != Mode::Track1) {
                return Err(Error::stage(
                    "linker",
                    format!("a linker trained for {} cannot filter ERROR spans; retrain with mode = \"track1\"", l.mode),
                ));
            }
        }
        Ok(linkers)
    }

    /// Predicted spans per utterance, voting when several recognizers are loaded.
    fn recognize(
        &self,
        recognizers: &Recognizers,
        retriever: &Retriever,
        kb: &KbStore,
        eval: &[Utterance],
        candidates: &[CandidateSet],
    ) -> Result<Vec<Vec<(usize, usize)>>> {
        let sentence = &retriever.model.sentence;
        eval.iter()
            .zip(candidates)
            .map(|(u, c)| {
                let tags = recognizers
                    .models
                    .iter()
                    .map(|m| m.predict_tags(&prepare_input(u, c, kb, sentence, &retriever.index, &m.cfg)?))
                    .collect::<Result<Vec<_>>>()?;
                let tags = if tags.len() == 1 {
                    tags.into_iter().next().unwrap()
                } else {
                    vote(&tags, &recognizers.vote)?
                };
                Ok(from_bio(&tags))
            })
            .collect()
    }

    fn link(&self, linkers: &Linkers, kb: &KbStore, mentions: &[MentionContext], mode: Mode) -> Result<Vec<Decision>> {
        let primary = &linkers.models[0];
        let index = primary.index(kb)?;
        let lists = primary.candidate_lists(mentions, None, kb, &index, mode)?;
        lists
            .iter()
            .map(|list| match &linkers.fusion {
                None => primary.disambiguate(list, mode),
                Some(w) => {
                    let list: CandidateList = if mode == Mode::Track2 { list.without_error() } else { list.clone() };
                    let retrieval: Vec<(String, f64)> =
                        list.entries.iter().map(|e| (e.entity_id.clone(), e.retrieval_score)).collect();
                    let rankers: Vec<Vec<(String, f64)>> = linkers
                        .models
                        .iter()
                        .map(|l| {
                            list.entries
                                .iter()
                                .zip(l.ranker.score_list(&list))
                                .map(|(e, s)| (e.entity_id.clone(), s))
                                .collect()
                        })
                        .collect();
                    let best = hybrid_rank(&retrieval, &rankers, w)?.swap_remove(0);
                    Ok(fused_decision(&best.entity_id, best.score))
                }
            })
            .collect()
    }

    /// Retrieve, recognize, link with ERROR filtering.
    pub fn run_track1(&self) -> Result<MetricsReport> {
        let report = self.track1()?;
        report.write(&self.cfg.paths.out_dir, "report_track1")?;
        self.timings().write(&self.cfg.paths.out_dir.join(artifacts::TIMINGS))?;
        Ok(report)
    }

    /// Link gold mentions; nothing is dropped.
    pub fn run_track2(&self) -> Result<MetricsReport> {
        let report = self.track2()?;
        report.write(&self.cfg.paths.out_dir, "report_track2")?;
        self.timings().write(&self.cfg.paths.out_dir.join(artifacts::TIMINGS))?;
        Ok(report)
    }

    /// Every track the configured mode supports, in one report.
    pub fn eval(&self) -> Result<MetricsReport> {
        let mut report = self.track2()?;
        if self.cfg.mode == Mode::Track1 {
            let t1 = self.track1()?;
            report.mode = Mode::Track1;
            report.retrieval = t1.retrieval;
            report.ner = t1.ner;
            report.track1 = t1.track1;
        }
        report.write(&self.cfg.paths.out_dir, "report")?;
        self.timings().write(&self.cfg.paths.out_dir.join(artifacts::TIMINGS))?;
        Ok(report)
    }

    fn track1(&self) -> Result<MetricsReport> {
        if self.cfg.mode != Mode::Track1 {
            return Err(Error::stage("track1", "configured mode is track2; set mode = \"track1\" to run track 1"));
        }
        let data = self.data(Mode::Track1)?;
        let retriever = self.load_retriever()?;
        let recognizers = if self.cfg.oracle_spans { None } else { Some(self.load_recognizers()?) };
        let linkers = self.load_linkers(Mode::Track1)?;
        let out = &self.cfg.paths.out_dir;
        let mut report = self.new_report(Mode::Track1, data.eval.len())?;

        let candidates = self.timed("retrieve", || {
            in_stage("retrieval", (|| {
                let sentence = &retriever.model.sentence;
                let c = retrieve_candidates(sentence, &retriever.index, &data.eval, self.cfg.retriever.top_k)?;
                report.retrieval = Some(recall_at_k(&retriever.index, sentence, &data.kb, &data.eval, &self.cfg.recall_ks)?);
                Ok(c)
            })())
        })?;
        write_jsonl(&out.join(artifacts::CANDIDATES), &candidates)?;

        let spans = match &recognizers {
            Some(r) => self.timed("recognize", || {
                in_stage("ner", self.recognize(r, &retriever, &data.kb, &data.eval, &candidates))
            })?,
            None => data.eval.iter().map(Utterance::spans).collect(),
        };
        write_jsonl(
            &out.join(artifacts::SPANS),
            data.eval.iter().zip(&spans).map(|(u, s)| SpanRecord {
                doc_id: u.doc_id.clone(),
                sent_index: u.sent_index,
                spans: s.clone(),
            }),
        )?;
        let gold_spans: Vec<_> = data.eval.iter().map(Utterance::spans).collect();
        report.ner = Some(span_f1(&spans, &gold_spans));

        let mut mentions = Vec::new();
        for (u, s) in data.eval.iter().zip(&spans) {
            for &(start, end) in s {
                mentions.push(in_stage("linker", MentionContext::from_utterance(u, start, end, self.cfg.linker.window))?);
            }
        }
        let decisions = self.timed("link", || in_stage("linker", self.link(&linkers, &data.kb, &mentions, Mode::Track1)))?;
        let mut links = Vec::new();
        let mut dropped = Vec::new();
        for (m, d) in mentions.iter().zip(&decisions) {
            match d.entity_id() {
                Some(id) => links.push(LinkRecord {
                    doc_id: m.doc_id.clone(),
                    sent_index: m.sent_index,
                    start: m.start,
                    end: m.end,
                    entity_id: id.to_owned(),
                    score: decision_score(d),
                }),
                None => dropped.push(DroppedRecord {
                    doc_id: m.doc_id.clone(),
                    sent_index: m.sent_index,
                    start: m.start,
                    end: m.end,
                    reason: "ERROR".into(),
                }),
            }
        }
        write_jsonl(&out.join(artifacts::TRACK1_LINKS), &links)?;
        write_jsonl(&out.join(artifacts::TRACK1_DROPPED), &dropped)?;
        report.track1 = Some(Track1Metrics {
            linking: linking_prf(&data.eval, &links),
            recognized: mentions.len(),
            dropped: dropped.len(),
        });
        if data.eval.is_empty() {
            zero_fill(&mut report);
        }
        Ok(report)
    }

    fn track2(&self) -> Result<MetricsReport> {
        let data = self.data(Mode::Track2)?;
        let mut report = self.new_report(Mode::Track2, data.eval.len())?;
        if data.eval.is_empty() {
            write_jsonl(&self.cfg.paths.out_dir.join(artifacts::TRACK2_LINKS), Vec::<LinkRecord>::new())?;
            report.track2 = Some(Track2Metrics {
                accuracy: 0.0,
                correct: 0,
                mentions: 0,
            });
            return Ok(report);
        }
        if data.eval.iter().all(|u| u.mentions.is_empty()) {
            return Err(Error::stage("track2", "evaluation corpus has no gold mention spans"));
        }
        let linkers = self.load_linkers(Mode::Track2)?;
        let mut mentions = Vec::new();
        let mut golds = Vec::new();
        for u in &data.eval {
            for m in &u.mentions {
                mentions.push(in_stage("linker", MentionContext::from_utterance(u, m.start, m.end, self.cfg.linker.window))?);
                golds.push(m.entity_id.as_str());
            }
        }
        let decisions = self.timed("link", || in_stage("linker", self.link(&linkers, &data.kb, &mentions, Mode::Track2)))?;
        let mut links = Vec::with_capacity(mentions.len());
        let mut correct = 0;
        for ((m, d), gold) in mentions.iter().zip(&decisions).zip(&golds) {
            let id = d
                .entity_id()
                .ok_or_else(|| Error::stage("track2", "a mention was dropped, which track 2 forbids"))?;
            correct += usize::from(id == *gold);
            links.push(LinkRecord {
                doc_id: m.doc_id.clone(),
                sent_index: m.sent_index,
                start: m.start,
                end: m.end,
                entity_id: id.to_owned(),
                score: decision_score(d),
            });
        }
        write_jsonl(&self.cfg.paths.out_dir.join(artifacts::TRACK2_LINKS), &links)?;
        report.track2 = Some(Track2Metrics {
            accuracy: correct as f64 / mentions.len() as f64,
            correct,
            mentions: mentions.len(),
        });
        Ok(report)
    }
}

fn decision_score(d: &Decision) -> f64 {
    match d {
        Decision::Entity { score, .. } | Decision::Nil { score } | Decision::Dropped { score } => *score,
    }
}

/// Strong-match linking P/R/F1: span and entity id must both match.
pub fn linking_prf(gold: &[Utterance], links: &[LinkRecord]) -> Prf {
    use std::collections::HashSet;
    let gold: HashSet<(&str, usize, usize, usize, &str)> = gold
        .iter()
        .flat_map(|u| {
            u.mentions
                .iter()
                .map(move |m| (u.doc_id.as_str(), u.sent_index, m.start, m.end, m.entity_id.as_str()))
        })
        .collect();
    let pred: HashSet<(&str, usize, usize, usize, &str)> = links
        .iter()
        .map(|l| (l.doc_id.as_str(), l.sent_index, l.start, l.end, l.entity_id.as_str()))
        .collect();
    Prf::from_counts(pred.intersection(&gold).count(), pred.len(), gold.len())
}

/// With nothing to evaluate every metric reads zero.
fn zero_fill(report: &mut MetricsReport) {
    let zero = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        ..Prf::from_counts(0, 0, 0)
    };
    report.ner = Some(zero);
    if let Some(t) = &mut report.track1 {
        t.linking = zero;
    }
}
