//! Mention windows, per-mention candidate lists and the interaction features
//! the ranker scores.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{DenseVector, TextEncoder};
use crate::error::{Error, Result};
use crate::kb::{normalize, normalize_tokens, KbStore, Mode, CLS, ERROR_ID, NIL_ID, SEP};
use crate::math::{char_trigrams, dot, jaccard_sorted};
use crate::retrieval::VectorIndex;

/// Tokens kept on each side of a mention.
pub const DEFAULT_WINDOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionContext {
    pub doc_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub mention: Vec<String>,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl MentionContext {
    /// Windows run into the neighbouring context sentences when the mention
    /// sits near a sentence edge.
    pub fn from_utterance(u: &Utterance, start: usize, end: usize, window: usize) -> Result<Self> {
        if start >= end || end > u.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "span ({start}, {end}) outside utterance of {} tokens",
                u.tokens.len()
            )));
        }
        let mut left: Vec<String> = u.prev_context.iter().chain(&u.tokens[..start]).cloned().collect();
        left.drain(..left.len().saturating_sub(window));
        let right: Vec<String> = u.tokens[end..].iter().chain(&u.next_context).take(window).cloned().collect();
        Ok(MentionContext {
            doc_id: u.doc_id.clone(),
            sent_index: u.sent_index,
            start,
            end,
            mention: u.tokens[start..end].to_vec(),
            left,
            right,
        })
    }

    /// `[CLS] mention… [SEP] left right [SEP]`, the mention-side encoder
    /// input. The encoder mean-pools its features, so the mention is written
    /// `repeats` times to keep it from being swamped by the window.
    pub fn query_tokens(&self, repeats: usize) -> Vec<String> {
        let repeats = repeats.max(1);
        let mut out = Vec::with_capacity(repeats * self.mention.len() + self.left.len() + self.right.len() + 3);
        out.push(CLS.to_owned());
        for _ in 0..repeats {
            out.extend(self.mention.iter().cloned());
        }
        out.push(SEP.to_owned());
        out.extend(self.left.iter().cloned());
        out.extend(self.right.iter().cloned());
        out.push(SEP.to_owned());
        out
    }
}

/// Every word used in a regular entity's title or aliases.
#[derive(Debug, Clone, Default)]
pub struct NameVocabulary(HashSet<String>);

impl NameVocabulary {
    pub fn from_kb(kb: &KbStore) -> Self {
        NameVocabulary(
            kb.regular()
                .iter()
                .flat_map(|e| std::iter::once(&e.title).chain(&e.aliases))
                .flat_map(|s| normalize(s).split(' ').map(str::to_owned).collect::<Vec<_>>())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// Fraction of `tokens` that occur in some entity name.
    pub fn coverage(&self, tokens: &[String]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        let hits = tokens.iter().filter(|t| self.0.contains(&t.to_lowercase())).count();
        hits as f64 / tokens.len() as f64
    }
}

/// Feature names in vector order. The first seven are the core interaction
/// features; the rest describe the entry's rank, the entity description and
/// the mention as a whole.
pub const FEATURE_NAMES: [&str; 13] = [
    "cosine",
    "title_match",
    "alias_jaccard",
    "retrieval_score",
    "is_nil",
    "is_error",
    "mention_length",
    "alias_match",
    "reciprocal_rank",
    "description_overlap",
    "list_best_jaccard",
    "list_best_score",
    "name_coverage",
];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub entity_id: String,
    /// Index row; `None` for sentinels.
    pub row: Option<usize>,
    pub retrieval_score: f64,
    pub features: Vec<f64>,
}

impl CandidateEntry {
    pub fn is_sentinel(&self) -> bool {
        self.row.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub mention: MentionContext,
    /// Retrieved entities in rank order, then NIL, then ERROR in track 1.
    pub entries: Vec<CandidateEntry>,
    /// Position of the gold entry, when known.
    pub gold: Option<usize>,
    pub mode: Mode,
}

impl CandidateList {
    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.entity_id == id)
    }

    /// Indices of retrieved (non-sentinel) entries.
    pub fn real_entries(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| !e.is_sentinel()).map(|(i, _)| i)
    }

    pub fn without_error(&self) -> CandidateList {
        let mut out = self.clone();
        if let Some(i) = out.position(ERROR_ID) {
            out.entries.remove(i);
            out.gold = match out.gold {
                Some(g) if g == i => None,
                Some(g) if g > i => Some(g - 1),
                g => g,
            };
        }
        out.mode = Mode::Track2;
        out
    }
}

struct Surfaces {
    title: String,
    names: Vec<String>,
    trigrams: Vec<Vec<String>>,
    description: HashSet<String>,
}

fn surfaces(kb: &KbStore, id: &str) -> Option<Surfaces> {
    let e = kb.get(id)?;
    let names: Vec<String> = std::iter::once(&e.title).chain(&e.aliases).map(|s| normalize(s)).collect();
    Some(Surfaces {
        title: normalize(&e.title),
        trigrams: names.iter().map(|n| char_trigrams(n)).collect(),
        names,
        description: e.description.split_whitespace().map(str::to_lowercase).collect(),
    })
}

/// Core interaction features of one (mention, entity) pair, in
/// `FEATURE_NAMES` order up to `mention_length`.
pub fn interaction_features(
    mention: &MentionContext,
    mention_vec: &DenseVector,
    entity_id: &str,
    entity_vec: Option<&[f64]>,
    retrieval_score: f64,
    kb: &KbStore,
) -> Vec<f64> {
    let len = mention.mention.len() as f64;
    match entity_id {
        NIL_ID => return vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, len],
        ERROR_ID => return vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, len],
        _ => {}
    }
    let surface = normalize_tokens(&mention.mention);
    let grams = char_trigrams(&surface);
    let (title, jaccard) = match surfaces(kb, entity_id) {
        Some(s) => (
            f64::from(u8::from(s.title == surface)),
            s.trigrams.iter().map(|t| jaccard_sorted(&grams, t)).fold(0.0, f64::max),
        ),
        None => (0.0, 0.0),
    };
    let cosine = entity_vec.map_or(0.0, |v| dot(mention_vec.as_slice(), v));
    vec![cosine, title, jaccard, retrieval_score, 0.0, 0.0, len]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListOptions {
    pub k: usize,
    pub mode: Mode,
    pub mention_repeats: usize,
}

/// Top-`k` retrieval for one mention plus the sentinels `mode` allows, with
/// full feature vectors. `gold`, when given, is forced into the list so that
/// training always has a target.
pub fn retrieve_for_mention(
    mention: &MentionContext,
    encoder: &dyn TextEncoder,
    index: &VectorIndex,
    kb: &KbStore,
    vocab: &NameVocabulary,
    opts: ListOptions,
    gold: Option<&str>,
) -> Result<CandidateList> {
    let ListOptions { k, mode, mention_repeats } = opts;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let query = encoder.encode_tokens(&mention.query_tokens(mention_repeats))?;
    let mention_vec = encoder.encode_tokens(&mention.mention)?;
    let hits = index.search(&query, k)?;
    let mut rows: Vec<(usize, f64)> = hits.entries.iter().map(|c| (c.row, c.score)).collect();
    if let Some(g) = gold {
        if let Some(row) = index.ids.iter().position(|id| id == g) {
            if !rows.iter().any(|&(r, _)| r == row) {
                rows.push((row, dot(query.as_slice(), index.row(row))));
            }
        }
    }

    let surface = normalize_tokens(&mention.mention);
    let window: HashSet<String> = mention.left.iter().chain(&mention.right).map(|t| t.to_lowercase()).collect();
    let mut entries: Vec<CandidateEntry> = Vec::with_capacity(rows.len() + 2);
    for (rank, &(row, score)) in rows.iter().enumerate() {
        let id = &index.ids[row];
        let mut f = interaction_features(mention, &mention_vec, id, Some(index.row(row)), score, kb);
        let (alias, overlap) = match surfaces(kb, id) {
            Some(s) => {
                let hit = s.description.iter().filter(|w| window.contains(*w)).count();
                (
                    f64::from(u8::from(s.names.contains(&surface))),
                    hit as f64 / s.description.len().max(1) as f64,
                )
            }
            None => (0.0, 0.0),
        };
        f.extend([alias, 1.0 / (1.0 + rank as f64), overlap]);
        entries.push(CandidateEntry {
            entity_id: id.clone(),
            row: Some(row),
            retrieval_score: score,
            features: f,
        });
    }
    let mut sentinels = vec![NIL_ID];
    if mode == Mode::Track1 {
        sentinels.push(ERROR_ID);
    }
    for id in sentinels {
        let mut f = interaction_features(mention, &mention_vec, id, None, 0.0, kb);
        f.extend([0.0, 0.0, 0.0]);
        entries.push(CandidateEntry {
            entity_id: id.to_owned(),
            row: None,
            retrieval_score: 0.0,
            features: f,
        });
    }
    let best_jaccard = entries.iter().map(|e| e.features[2]).fold(0.0, f64::max);
    let best_score = entries
        .iter()
        .filter(|e| !e.is_sentinel())
        .map(|e| e.retrieval_score)
        .fold(0.0, f64::max);
    let coverage = vocab.coverage(&mention.mention);
    for e in &mut entries {
        e.features.extend([best_jaccard, best_score, coverage]);
        debug_assert_eq!(e.features.len(), NUM_FEATURES);
    }
    let gold = gold.and_then(|g| entries.iter().position(|e| e.entity_id == g));
    Ok(CandidateList {
        mention: mention.clone(),
        entries,
        gold,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderParams, FeatureSpec, Side};
    use crate::kb::EntityRecord;
    use crate::retrieval::build_index;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn opts(k: usize, mode: Mode) -> ListOptions {
        ListOptions { k, mode, mention_repeats: 4 }
    }

    fn utt(tokens: &str, prev: &str, next: &str) -> Utterance {
        Utterance {
            doc_id: "d".into(),
            sent_index: 3,
            tokens: toks(tokens),
            prev_context: toks(prev),
            next_context: toks(next),
            mentions: vec![],
        }
    }

    fn fixture(mode: Mode) -> (KbStore, EncoderParams, EncoderParams, VectorIndex) {
        let rec = |id: &str, title: &str, aliases: &[&str], desc: &str| EntityRecord {
            id: id.into(),
            title: title.into(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            description: desc.into(),
        };
        let kb = KbStore::from_records(
            (0..70)
                .map(|i| rec(&format!("E{i}"), &format!("name{i} thing"), &[], "filler words"))
                .chain([
                    rec("Q1", "Yao Ming", &["the giant"], "basketball player"),
                    rec("Q2", "Houston", &[], "city in texas"),
                ])
                .collect(),
            mode,
        )
        .unwrap();
        let spec = FeatureSpec { buckets: 1 << 12, ..Default::default() };
        let entity = EncoderParams::new(spec, 16, Side::Entity, 3).unwrap();
        let mut sentence = entity.clone();
        sentence.side = Side::Sentence;
        let index = build_index(&entity, &kb).unwrap();
        (kb, sentence, entity, index)
    }

    #[test]
    fn windows_cross_into_context_and_are_clipped() {
        let u = utt("we met yao ming today", "a b c", "x y");
        let m = MentionContext::from_utterance(&u, 2, 4, 3).unwrap();
        assert_eq!(m.mention, toks("yao ming"));
        assert_eq!(m.left, toks("c we met"));
        assert_eq!(m.right, toks("today x y"));
        let wide = MentionContext::from_utterance(&u, 2, 4, 16).unwrap();
        assert_eq!(wide.left, toks("a b c we met"));
        assert!(MentionContext::from_utterance(&u, 4, 4, 3).is_err());
        assert!(MentionContext::from_utterance(&u, 4, 6, 3).is_err());
        assert_eq!(m.query_tokens(2), toks("[CLS] yao ming yao ming [SEP] c we met today x y [SEP]"));
    }

    #[test]
    fn list_sizes_follow_mode() {
        for (mode, extra) in [(Mode::Track1, 2), (Mode::Track2, 1)] {
            let (kb, s, _, index) = fixture(mode);
            let vocab = NameVocabulary::from_kb(&kb);
            let m = MentionContext::from_utterance(&utt("we met yao ming", "", ""), 2, 4, 16).unwrap();
            let list = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(64, mode), None).unwrap();
            assert_eq!(list.entries.len(), 64 + extra);
            assert!(list.position(NIL_ID).is_some());
            assert_eq!(list.position(ERROR_ID).is_some(), mode == Mode::Track1);
            let ids: HashSet<&str> = list.entries.iter().map(|e| e.entity_id.as_str()).collect();
            assert_eq!(ids.len(), list.entries.len());
            assert!(list.entries.iter().all(|e| e.features.len() == NUM_FEATURES));
        }
    }

    #[test]
    fn gold_is_forced_into_training_lists() {
        let (kb, s, _, index) = fixture(Mode::Track1);
        let vocab = NameVocabulary::from_kb(&kb);
        let m = MentionContext::from_utterance(&utt("we met yao ming", "", ""), 2, 4, 16).unwrap();
        let list = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(1, Mode::Track1), Some("Q2")).unwrap();
        assert_eq!(list.entries[list.gold.unwrap()].entity_id, "Q2");
        let nil = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(1, Mode::Track1), Some(NIL_ID)).unwrap();
        assert_eq!(nil.entries[nil.gold.unwrap()].entity_id, NIL_ID);
    }

    #[test]
    fn title_flag_and_sentinel_features() {
        let (kb, s, _, index) = fixture(Mode::Track1);
        let m = MentionContext::from_utterance(&utt("we met Yao  Ming", "", ""), 2, 4, 16).unwrap();
        let mv = s.encode(&m.mention).unwrap();
        let row = index.ids.iter().position(|id| id == "Q1").unwrap();
        let f = interaction_features(&m, &mv, "Q1", Some(index.row(row)), 0.5, &kb);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[3], 0.5);
        assert_eq!(f[6], 2.0);
        let nil = interaction_features(&m, &mv, NIL_ID, None, 0.0, &kb);
        assert_eq!(nil, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        let err = interaction_features(&m, &mv, ERROR_ID, None, 0.0, &kb);
        assert_eq!(&err[..6], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn description_overlap_and_coverage() {
        let (kb, s, _, index) = fixture(Mode::Track2);
        let vocab = NameVocabulary::from_kb(&kb);
        let m = MentionContext::from_utterance(&utt("the basketball player yao ming", "", ""), 3, 5, 16).unwrap();
        let list = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(72, Mode::Track2), Some("Q1")).unwrap();
        let q1 = &list.entries[list.gold.unwrap()];
        assert_eq!(q1.features[9], 1.0);
        assert_eq!(q1.features[12], 1.0);
        let m = MentionContext::from_utterance(&utt("so the giant laughed", "", ""), 0, 2, 16).unwrap();
        assert_eq!(vocab.coverage(&m.mention), 0.5);
    }

    #[test]
    fn dropping_error_keeps_gold_aligned() {
        let (kb, s, _, index) = fixture(Mode::Track1);
        let vocab = NameVocabulary::from_kb(&kb);
        let m = MentionContext::from_utterance(&utt("we met yao ming", "", ""), 2, 4, 16).unwrap();
        let list = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(4, Mode::Track1), Some(NIL_ID)).unwrap();
        let t2 = list.without_error();
        assert_eq!(t2.entries.len(), list.entries.len() - 1);
        assert_eq!(t2.entries[t2.gold.unwrap()].entity_id, NIL_ID);
        let err = retrieve_for_mention(&m, &s, &index, &kb, &vocab, opts(4, Mode::Track1), Some(ERROR_ID)).unwrap();
        assert_eq!(err.without_error().gold, None);
    }
}
