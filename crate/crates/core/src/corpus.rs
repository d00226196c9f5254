//! Utterances with mention annotations, BIO conversion and train/valid splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{KbStore, NIL_ID};

/// Sentences of document context kept on each side of an utterance.
pub const CONTEXT_SENTENCES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

impl MentionSpan {
    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<MentionSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub doc_id: String,
    pub sent_index: usize,
    pub tokens: Vec<String>,
    pub prev_context: Vec<String>,
    pub next_context: Vec<String>,
    pub mentions: Vec<MentionSpan>,
}

impl Utterance {
    /// `prev ⊕ next`, the flattened document context.
    pub fn context(&self) -> Vec<String> {
        let mut ctx = self.prev_context.clone();
        ctx.extend(self.next_context.iter().cloned());
        ctx
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.mentions.iter().map(MentionSpan::span).collect()
    }

    /// Distinct non-NIL gold entity ids, in first-mention order.
    pub fn gold_entities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.mentions
            .iter()
            .map(|m| m.entity_id.as_str())
            .filter(|id| *id != NIL_ID && seen.insert(*id))
            .collect()
    }

    pub fn key(&self) -> (String, usize) {
        (self.doc_id.clone(), self.sent_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    /// Mentions whose entity id was absent from the KB and got mapped to NIL.
    pub unresolved: usize,
}

/// Checks bounds, ordering and overlap; returns spans sorted by start.
pub fn validate_spans(len: usize, mentions: &mut [MentionSpan]) -> std::result::Result<(), String> {
    mentions.sort_by_key(|m| (m.start, m.end));
    let mut last_end = 0;
    for (i, m) in mentions.iter().enumerate() {
        if m.start >= m.end {
            return Err(format!("empty or reversed span [{}, {})", m.start, m.end));
        }
        if m.end > len {
            return Err(format!("span [{}, {}) out of range for length {len}", m.start, m.end));
        }
        if i > 0 && m.start < last_end {
            return Err(format!("overlapping span [{}, {})", m.start, m.end));
        }
        last_end = m.end;
    }
    Ok(())
}

/// Reconstructs document context from adjacent `sent_index` values and
/// resolves mention ids against the KB. Ids missing from the KB become NIL.
pub fn build_utterances(records: Vec<CorpusRecord>, kb: &KbStore) -> Result<Corpus> {
    let mut unresolved = 0;
    let mut by_doc: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert((r.doc_id.as_str(), r.sent_index)) {
            return Err(Error::InvalidRecord(format!(
                "duplicate sentence {}#{}",
                r.doc_id, r.sent_index
            )));
        }
        by_doc.entry(&r.doc_id).or_default().push((r.sent_index, i));
    }
    let mut prev_ctx = vec![Vec::new(); records.len()];
    let mut next_ctx = vec![Vec::new(); records.len()];
    for sents in by_doc.values_mut() {
        sents.sort_unstable();
        for (pos, &(_, i)) in sents.iter().enumerate() {
            let lo = pos.saturating_sub(CONTEXT_SENTENCES);
            let hi = (pos + 1 + CONTEXT_SENTENCES).min(sents.len());
            prev_ctx[i] = sents[lo..pos]
                .iter()
                .flat_map(|&(_, j)| records[j].tokens.iter().cloned())
                .collect();
            next_ctx[i] = sents[pos + 1..hi]
                .iter()
                .flat_map(|&(_, j)| records[j].tokens.iter().cloned())
                .collect();
        }
    }
    let mut utterances = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let mut mentions = r.mentions;
        for m in &mut mentions {
            if !kb.contains(&m.entity_id) {
                unresolved += 1;
                log::warn!(
                    "{}#{}: entity {:?} not in KB, mapped to NIL",
                    r.doc_id,
                    r.sent_index,
                    m.entity_id
                );
                m.entity_id = NIL_ID.to_owned();
            }
        }
        utterances.push(Utterance {
            doc_id: r.doc_id,
            sent_index: r.sent_index,
            tokens: r.tokens,
            prev_context: std::mem::take(&mut prev_ctx[i]),
            next_context: std::mem::take(&mut next_ctx[i]),
            mentions,
        });
    }
    Ok(Corpus {
        utterances,
        unresolved,
    })
}

pub fn read_corpus_records(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_owned(),
            line: n + 1,
            message,
        };
        let mut rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.tokens.is_empty() {
            return Err(malformed("utterance has no tokens".into()));
        }
        validate_spans(rec.tokens.len(), &mut rec.mentions).map_err(malformed)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, kb: &KbStore) -> Result<Corpus> {
    build_utterances(read_corpus_records(path)?, kb)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }
}

pub type TagSequence = Vec<Tag>;

/// True when no `I` starts the sequence or follows an `O`.
pub fn is_bio_valid(tags: &[Tag]) -> bool {
    let mut prev = Tag::O;
    tags.iter().all(|&t| {
        let ok = !(t == Tag::I && prev == Tag::O);
        prev = t;
        ok
    })
}

/// An `I` whose left neighbour is `O` (or the sequence start) becomes `B`.
pub fn bio_repair(tags: &mut [Tag]) {
    let mut prev = Tag::O;
    for t in tags.iter_mut() {
        if *t == Tag::I && prev == Tag::O {
            *t = Tag::B;
        }
        prev = *t;
    }
}

pub fn spans_to_bio(len: usize, spans: &[(usize, usize)]) -> TagSequence {
    let mut tags = vec![Tag::O; len];
    for &(s, e) in spans {
        tags[s] = Tag::B;
        for t in &mut tags[s + 1..e] {
            *t = Tag::I;
        }
    }
    tags
}

pub fn to_bio(u: &Utterance) -> TagSequence {
    spans_to_bio(u.tokens.len(), &u.spans())
}

/// Spans encoded by a tag sequence; invalid input is repaired first.
pub fn from_bio(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut tags = tags.to_vec();
    bio_repair(&mut tags);
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::B => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                open = Some(i);
            }
            Tag::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
            }
            Tag::I => {}
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

/// Document-level 4:1 split. Valid gets `round(n_docs / 5)` documents.
pub fn split_train_valid(
    utterances: &[Utterance],
    seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let docs: BTreeSet<&str> = utterances.iter().map(|u| u.doc_id.as_str()).collect();
    if docs.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 documents to split, got {}",
            docs.len()
        )));
    }
    let mut docs: Vec<&str> = docs.into_iter().collect();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((docs.len() as f64) / 5.0).round().max(1.0) as usize;
    let valid_docs: HashSet<&str> = docs[..n_valid].iter().copied().collect();
    let (valid, train): (Vec<_>, Vec<_>) = utterances
        .iter()
        .cloned()
        .partition(|u| valid_docs.contains(u.doc_id.as_str()));
    Ok((train, valid))
}
