//! Sentence, context and candidate-entity inputs of the recognizer.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::Result;
use crate::kb::{entity_text, normalize, KbStore, CLS, SEP};
use crate::math::{char_trigrams, dot, jaccard_sorted};
use crate::retrieval::{CandidateSet, VectorIndex};

/// Longest word n-gram compared against candidate names.
pub const MAX_MATCH_WORDS: usize = 4;

/// `[CLS] x [SEP] ctx [SEP] E₁ … E_M [SEP]` with the position of every part.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedInput {
    pub tokens: Vec<String>,
    pub sentence_region: Range<usize>,
    pub context_region: Range<usize>,
    pub entity_regions: Vec<Range<usize>>,
}

impl ComposedInput {
    pub fn sentence(&self) -> &[String] {
        &self.tokens[self.sentence_region.clone()]
    }
}

pub fn compose_input(
    x: &[String],
    ctx: &[String],
    candidates: &CandidateSet,
    kb: &KbStore,
    m: usize,
) -> ComposedInput {
    let mut tokens = Vec::with_capacity(x.len() + ctx.len() + 8 * m + 4);
    tokens.push(CLS.to_owned());
    let sentence_region = tokens.len()..tokens.len() + x.len();
    tokens.extend(x.iter().cloned());
    tokens.push(SEP.to_owned());
    let context_region = tokens.len()..tokens.len() + ctx.len();
    tokens.extend(ctx.iter().cloned());
    tokens.push(SEP.to_owned());
    let mut entity_regions = Vec::with_capacity(m);
    for c in candidates.entries.iter().take(m) {
        let Some(e) = kb.get(&c.entity_id) else { continue };
        let text = entity_text(e);
        entity_regions.push(tokens.len()..tokens.len() + text.len());
        tokens.extend(text);
    }
    tokens.push(SEP.to_owned());
    ComposedInput {
        tokens,
        sentence_region,
        context_region,
        entity_regions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenKnowledge {
    /// Max dot score between the token's window vector and a candidate vector.
    pub similarity: f64,
    /// Some n-gram covering the token equals a candidate title or alias.
    pub alias_match: bool,
    /// Best (lowest) candidate rank among exact matches.
    pub match_rank: Option<usize>,
    /// The token starts an exactly matching n-gram.
    pub match_begin: bool,
    /// Best character-trigram Jaccard of a covering n-gram against a
    /// same-length candidate name.
    pub soft_match: f64,
    /// Same, restricted to n-grams starting at the token.
    pub soft_begin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeFeatures {
    /// Sentence-side encoding of the context; zeros when there is none.
    pub context_vector: Vec<f64>,
    /// 1 when the token also occurs in the context.
    pub recurrence: Vec<f64>,
    /// 1 when a word bigram covering the token also occurs in the context.
    pub phrase_recurrence: Vec<f64>,
    /// Dot score between the token window vector and the context vector.
    pub affinity: Vec<f64>,
    pub tokens: Vec<TokenKnowledge>,
}

struct Surface {
    words: usize,
    trigrams: Vec<String>,
}

/// Window of radius one around `i`.
fn window(x: &[String], i: usize) -> Vec<String> {
    x[i.saturating_sub(1)..(i + 2).min(x.len())].to_vec()
}

pub fn knowledge_features(
    x: &[String],
    ctx: &[String],
    candidates: &CandidateSet,
    kb: &KbStore,
    encoder: &dyn TextEncoder,
    index: &VectorIndex,
    m: usize,
) -> Result<KnowledgeFeatures> {
    let lower: Vec<String> = x.iter().map(|t| t.to_lowercase()).collect();
    let context_vector = if ctx.is_empty() {
        vec![0.0; encoder.dim()]
    } else {
        encoder.encode_tokens(ctx)?.into_inner()
    };
    let ctx_words: HashSet<String> = ctx.iter().map(|t| t.to_lowercase()).collect();
    let recurrence = lower.iter().map(|t| f64::from(u8::from(ctx_words.contains(t)))).collect();
    let ctx_lower: Vec<String> = ctx.iter().map(|t| t.to_lowercase()).collect();
    let ctx_bigrams: HashSet<(&str, &str)> = ctx_lower.windows(2).map(|w| (w[0].as_str(), w[1].as_str())).collect();
    let mut phrase_recurrence = vec![0.0; x.len()];
    for (i, w) in lower.windows(2).enumerate() {
        if ctx_bigrams.contains(&(w[0].as_str(), w[1].as_str())) {
            phrase_recurrence[i] = 1.0;
            phrase_recurrence[i + 1] = 1.0;
        }
    }

    let cands: Vec<_> = candidates.entries.iter().take(m).collect();
    let mut exact: HashMap<String, usize> = HashMap::new();
    let mut surfaces = Vec::new();
    for (rank, c) in cands.iter().enumerate() {
        let Some(e) = kb.get(&c.entity_id) else { continue };
        for name in std::iter::once(&e.title).chain(&e.aliases) {
            let norm = normalize(name);
            if norm.is_empty() {
                continue;
            }
            let best = exact.entry(norm.clone()).or_insert(rank);
            *best = (*best).min(rank);
            surfaces.push(Surface {
                words: norm.split(' ').count(),
                trigrams: char_trigrams(&norm),
            });
        }
    }

    let l = x.len();
    let mut tokens = vec![TokenKnowledge::default(); l];
    let mut affinity = vec![0.0; l];
    for i in 0..l {
        let v = encoder.encode_tokens(&window(x, i))?;
        affinity[i] = dot(v.as_slice(), &context_vector);
        tokens[i].similarity = cands
            .iter()
            .map(|c| dot(v.as_slice(), index.row(c.row)))
            .fold(0.0, f64::max);
    }
    for n in 1..=MAX_MATCH_WORDS.min(l) {
        for s in 0..=l - n {
            let gram = lower[s..s + n].join(" ");
            if let Some(&rank) = exact.get(&gram) {
                tokens[s].match_begin = true;
                for t in &mut tokens[s..s + n] {
                    t.alias_match = true;
                    t.match_rank = Some(t.match_rank.map_or(rank, |r| r.min(rank)));
                }
            }
            let grams = char_trigrams(&gram);
            let soft = surfaces
                .iter()
                .filter(|sf| sf.words == n)
                .map(|sf| jaccard_sorted(&grams, &sf.trigrams))
                .fold(0.0, f64::max);
            if soft > 0.0 {
                tokens[s].soft_begin = tokens[s].soft_begin.max(soft);
                for t in &mut tokens[s..s + n] {
                    t.soft_match = t.soft_match.max(soft);
                }
            }
        }
    }
    Ok(KnowledgeFeatures {
        context_vector,
        recurrence,
        phrase_recurrence,
        affinity,
        tokens,
    })
}
