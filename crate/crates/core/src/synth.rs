//! Synthetic knowledge bases and talk corpora for desk-scale experiments.
//!
//! Entity names are built from a name lexicon that partly overlaps the
//! everyday filler vocabulary, so surface form alone does not reveal a
//! mention. Each talk revolves around a few focus entities that recur across
//! sentences, and mentions are often accompanied by a word from the entity's
//! description. Mention tokens receive character edits at the noise rate.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, CorpusRecord, MentionSpan};
use crate::error::{Error, Result};
use crate::kb::{normalize, write_kb, EntityRecord, NIL_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub entities: usize,
    pub documents: usize,
    pub sentences_per_doc: usize,
    /// Fraction of entities that share an alias with another entity.
    pub ambiguity: f64,
    /// Per-token probability of a character edit inside a mention.
    pub noise: f64,
    /// Probability that a focus entity of a talk is absent from the KB.
    pub nil_rate: f64,
    pub focus_per_doc: usize,
    pub common_words: usize,
    pub name_words: usize,
    /// Fraction of the name lexicon borrowed from the filler vocabulary.
    pub name_overlap: f64,
    pub description_words: usize,
    /// Probability that a mention is accompanied by a description word.
    pub cue_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 1000,
            documents: 160,
            sentences_per_doc: 12,
            ambiguity: 0.3,
            noise: 0.1,
            nil_rate: 0.05,
            focus_per_doc: 4,
            common_words: 1500,
            name_words: 700,
            name_overlap: 0.4,
            description_words: 6,
            cue_rate: 0.6,
            seed: 2022,
        }
    }
}

impl SynthConfig {
    /// Standard corpus whose names collide with everyday words more often,
    /// so that recognizing them needs more than word shape.
    pub fn ambiguous() -> Self {
        SynthConfig {
            name_overlap: 0.6,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub kb: Vec<EntityRecord>,
    pub corpus: Vec<CorpusRecord>,
}

impl SynthData {
    pub fn write(&self, kb_path: impl AsRef<Path>, corpus_path: impl AsRef<Path>) -> Result<()> {
        write_kb(kb_path, &self.kb)?;
        write_corpus(corpus_path, &self.corpus)
    }
}

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "that", "we", "i", "you", "it", "this", "was",
    "about", "with", "for", "on", "so", "they", "have", "what", "like", "know", "think",
    "people", "really", "just", "very", "there", "when", "how", "one", "all", "can", "but",
    "my", "our", "at", "from", "be", "do", "are", "said", "met", "saw", "told", "called",
    "because", "then", "now", "here", "also", "more", "some", "these", "those", "would",
];

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "br", "ch", "dr", "gr", "kl", "pl", "sh", "st", "tr", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m", "t", "k", "nd", "rt"];

/// Names follow their own phonotactics, the way foreign proper nouns stand
/// out from everyday speech.
const NAME_ONSETS: &[&str] = &[
    "x", "q", "zh", "kh", "y", "ts", "ph", "gh", "bj", "vl", "dz", "rh", "sv", "kw",
];
const NAME_VOWELS: &[&str] = &["y", "aa", "oe", "uu", "ei", "ao", "ae", "ui"];
const NAME_CODAS: &[&str] = &["", "", "x", "q", "ng", "sk", "v", "z", "gg"];

type Phonotactics = (&'static [&'static str], &'static [&'static str], &'static [&'static str]);
const COMMON_SHAPE: Phonotactics = (ONSETS, VOWELS, CODAS);
const NAME_SHAPE: Phonotactics = (NAME_ONSETS, NAME_VOWELS, NAME_CODAS);

fn pseudo_word(shape: Phonotactics, rng: &mut ChaCha8Rng) -> String {
    let (onsets, vowels, codas) = shape;
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(onsets.choose(rng).unwrap());
        w.push_str(vowels.choose(rng).unwrap());
    }
    w.push_str(codas.choose(rng).unwrap());
    w
}

fn fresh_words(
    n: usize,
    shape: Phonotactics,
    taken: &mut HashSet<String>,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(shape, rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// One character edit: substitution, deletion, insertion or transposition.
fn corrupt(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let letter = |rng: &mut ChaCha8Rng| LETTERS[rng.gen_range(0..LETTERS.len())] as char;
    loop {
        let mut c = chars.clone();
        let i = rng.gen_range(0..c.len());
        match rng.gen_range(0..4) {
            0 => c[i] = letter(rng),
            1 if c.len() > 2 => {
                c.remove(i);
            }
            2 => c.insert(i, letter(rng)),
            _ if c.len() > 1 => {
                let j = if i + 1 < c.len() { i + 1 } else { i - 1 };
                c.swap(i, j);
            }
            _ => continue,
        }
        if c != chars {
            chars = c;
            break;
        }
    }
    chars.into_iter().collect()
}

struct Lexicon {
    common: Vec<String>,
    names: Vec<String>,
}

impl Lexicon {
    fn build(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut taken: HashSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        let common = fresh_words(cfg.common_words.max(1), COMMON_SHAPE, &mut taken, rng);
        let borrowed = ((cfg.name_words as f64) * cfg.name_overlap).round() as usize;
        let borrowed = borrowed.min(common.len());
        let mut names: Vec<String> = common.choose_multiple(rng, borrowed).cloned().collect();
        names.extend(fresh_words(cfg.name_words.max(2) - borrowed, NAME_SHAPE, &mut taken, rng));
        names.shuffle(rng);
        Lexicon { common, names }
    }
}

/// Name generator that keeps every surface unique.
struct Surfaces<'a> {
    lex: &'a Lexicon,
    used: HashSet<String>,
}

impl Surfaces<'_> {
    fn fresh(&mut self, rng: &mut ChaCha8Rng, words: usize) -> String {
        loop {
            let s = (0..words)
                .map(|_| self.lex.names.choose(rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ");
            if self.used.insert(normalize(&s)) {
                return s;
            }
        }
    }

    fn title(&mut self, rng: &mut ChaCha8Rng) -> String {
        let words = match rng.gen_range(0..20) {
            0..=3 => 1,
            4..=14 => 2,
            _ => 3,
        };
        self.fresh(rng, words)
    }
}

struct SynthEntity {
    id: String,
    title: String,
    aliases: Vec<String>,
    description: Vec<String>,
}

impl SynthEntity {
    fn surface(&self, rng: &mut ChaCha8Rng) -> &str {
        if !self.aliases.is_empty() && rng.gen_bool(0.4) {
            self.aliases.choose(rng).unwrap()
        } else {
            &self.title
        }
    }
}

fn make_entities(
    n: usize,
    id_prefix: &str,
    surfaces: &mut Surfaces<'_>,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<SynthEntity> {
    let lex = surfaces.lex;
    (0..n)
        .map(|i| {
            let title = surfaces.title(rng);
            let mut aliases = Vec::new();
            if rng.gen_bool(0.5) {
                let words = rng.gen_range(1..=2);
                aliases.push(surfaces.fresh(rng, words));
            }
            let description = lex
                .common
                .choose_multiple(rng, cfg.description_words.max(1))
                .cloned()
                .collect();
            SynthEntity {
                id: format!("{id_prefix}{}", i + 1),
                title,
                aliases,
                description,
            }
        })
        .collect()
}

/// Generates a KB and a corpus. Deterministic in `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.entities == 0 || cfg.documents == 0 || cfg.sentences_per_doc == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be at least 1".into()));
    }
    for (name, p) in [
        ("ambiguity", cfg.ambiguity),
        ("noise", cfg.noise),
        ("nil_rate", cfg.nil_rate),
        ("name_overlap", cfg.name_overlap),
        ("cue_rate", cfg.cue_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::build(cfg, &mut rng);
    let mut surfaces = Surfaces {
        lex: &lex,
        used: HashSet::new(),
    };
    let mut entities = make_entities(cfg.entities, "Q", &mut surfaces, cfg, &mut rng);
    if cfg.entities > 1 {
        for i in 0..entities.len() {
            if rng.gen_bool(cfg.ambiguity) {
                let mut j = rng.gen_range(0..entities.len() - 1);
                if j >= i {
                    j += 1;
                }
                let words = rng.gen_range(1..=2);
                let shared = surfaces.fresh(&mut rng, words);
                entities[i].aliases.push(shared.clone());
                entities[j].aliases.push(shared);
            }
        }
    }
    let n_nil = ((cfg.entities as f64 * cfg.nil_rate).ceil() as usize).max(1);
    let nil_entities = make_entities(n_nil, "X", &mut surfaces, cfg, &mut rng);

    let mut corpus = Vec::with_capacity(cfg.documents * cfg.sentences_per_doc);
    for doc in 0..cfg.documents {
        let doc_id = format!("talk{:04}", doc + 1);
        let focus: Vec<(bool, usize)> = (0..cfg.focus_per_doc.max(1))
            .map(|_| {
                if rng.gen_bool(cfg.nil_rate) {
                    (true, rng.gen_range(0..nil_entities.len()))
                } else {
                    (false, rng.gen_range(0..entities.len()))
                }
            })
            .collect();
        for sent in 0..cfg.sentences_per_doc {
            let n_mentions = match rng.gen_range(0..20) {
                0..=2 => 0,
                3..=11 => 1,
                12..=17 => 2,
                _ => 3,
            };
            let mut tokens: Vec<String> = Vec::new();
            let mut mentions = Vec::new();
            filler(&lex, &mut tokens, rng.gen_range(2..=4), &mut rng);
            for _ in 0..n_mentions {
                let (is_nil, idx) = if rng.gen_bool(0.1) {
                    (false, rng.gen_range(0..entities.len()))
                } else {
                    *focus.choose(&mut rng).unwrap()
                };
                let ent = if is_nil { &nil_entities[idx] } else { &entities[idx] };
                let cue = rng.gen_bool(cfg.cue_rate).then(|| {
                    ent.description.choose(&mut rng).unwrap().clone()
                });
                let cue_first = rng.gen_bool(0.5);
                if let (Some(c), true) = (&cue, cue_first) {
                    tokens.push(c.clone());
                    tokens.push(FUNCTION_WORDS.choose(&mut rng).unwrap().to_string());
                }
                let start = tokens.len();
                for w in ent.surface(&mut rng).split_whitespace() {
                    tokens.push(if rng.gen_bool(cfg.noise) {
                        corrupt(w, &mut rng)
                    } else {
                        w.to_owned()
                    });
                }
                mentions.push(MentionSpan {
                    start,
                    end: tokens.len(),
                    entity_id: if is_nil { NIL_ID.to_owned() } else { ent.id.clone() },
                });
                if let (Some(c), false) = (&cue, cue_first) {
                    tokens.push(FUNCTION_WORDS.choose(&mut rng).unwrap().to_string());
                    tokens.push(c.clone());
                }
                filler(&lex, &mut tokens, rng.gen_range(1..=4), &mut rng);
            }
            if n_mentions == 0 {
                filler(&lex, &mut tokens, rng.gen_range(4..=8), &mut rng);
            }
            corpus.push(CorpusRecord {
                doc_id: doc_id.clone(),
                sent_index: sent,
                tokens,
                mentions,
            });
        }
    }

    let kb = entities
        .into_iter()
        .map(|e| EntityRecord {
            id: e.id,
            title: e.title,
            aliases: e.aliases,
            description: e.description.join(" "),
        })
        .collect();
    Ok(SynthData { kb, corpus })
}

/// Function words interleaved with everyday content words.
fn filler(lex: &Lexicon, out: &mut Vec<String>, n: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..n {
        if rng.gen_bool(0.55) {
            out.push(FUNCTION_WORDS.choose(rng).unwrap().to_string());
        } else {
            out.push(lex.common.choose(rng).unwrap().clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_utterances;
    use crate::kb::{KbStore, Mode};
    use std::collections::HashMap;

    fn small(ambiguity: f64, noise: f64) -> SynthConfig {
        SynthConfig {
            entities: 100,
            documents: 20,
            sentences_per_doc: 25,
            ambiguity,
            noise,
            seed: 5,
            ..Default::default()
        }
    }

    fn surface_owners(kb: &[EntityRecord]) -> HashMap<String, HashSet<String>> {
        let mut owners: HashMap<String, HashSet<String>> = HashMap::new();
        for e in kb {
            for s in std::iter::once(&e.title).chain(&e.aliases) {
                owners.entry(normalize(s)).or_default().insert(e.id.clone());
            }
        }
        owners
    }

    #[test]
    fn zero_ambiguity_means_unique_aliases() {
        let data = synth_generate(&small(0.0, 0.1)).unwrap();
        assert!(surface_owners(&data.kb).values().all(|o| o.len() == 1));
        let data = synth_generate(&small(0.3, 0.1)).unwrap();
        assert!(surface_owners(&data.kb).values().any(|o| o.len() > 1));
    }

    #[test]
    fn noiseless_mentions_are_exact_surfaces_and_link_by_alias() {
        let data = synth_generate(&small(0.3, 0.0)).unwrap();
        let kb = KbStore::from_records(data.kb.clone(), Mode::Track1).unwrap();
        let corpus = build_utterances(data.corpus.clone(), &kb).unwrap();
        assert_eq!(corpus.unresolved, 0);
        let (mut linked, mut total) = (0, 0);
        for u in &corpus.utterances {
            for m in &u.mentions {
                if m.entity_id == NIL_ID {
                    continue;
                }
                total += 1;
                let surface = &u.tokens[m.start..m.end];
                if kb.alias_candidates(surface).contains(m.entity_id.as_str()) {
                    linked += 1;
                }
            }
        }
        assert!(total > 100);
        assert_eq!(linked, total);
    }

    #[test]
    fn noise_changes_some_mentions() {
        let data = synth_generate(&small(0.3, 0.5)).unwrap();
        let kb = KbStore::from_records(data.kb.clone(), Mode::Track1).unwrap();
        let misses = data
            .corpus
            .iter()
            .flat_map(|r| r.mentions.iter().map(move |m| (r, m)))
            .filter(|(_, m)| m.entity_id != NIL_ID)
            .filter(|(r, m)| kb.alias_candidates(&r.tokens[m.start..m.end]).is_empty())
            .count();
        assert!(misses > 0);
    }

    #[test]
    fn deterministic_and_byte_identical() {
        let cfg = SynthConfig {
            entities: 100,
            documents: 42,
            sentences_per_doc: 12,
            seed: 77,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = synth_generate(&cfg).unwrap();
        a.write(dir.path().join("a.kb"), dir.path().join("a.corpus")).unwrap();
        synth_generate(&cfg)
            .unwrap()
            .write(dir.path().join("b.kb"), dir.path().join("b.corpus"))
            .unwrap();
        let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
        assert_eq!(read("a.kb"), read("b.kb"));
        assert_eq!(read("a.corpus"), read("b.corpus"));
        assert_eq!(a.corpus.len(), 42 * 12);
    }

    #[test]
    fn every_gold_resolves_and_nil_present() {
        let data = synth_generate(&SynthConfig { nil_rate: 0.3, ..small(0.3, 0.1) }).unwrap();
        let ids: HashSet<&str> = data.kb.iter().map(|e| e.id.as_str()).collect();
        let mut nil = 0;
        for r in &data.corpus {
            for m in &r.mentions {
                if m.entity_id == NIL_ID {
                    nil += 1;
                } else {
                    assert!(ids.contains(m.entity_id.as_str()));
                }
            }
        }
        assert!(nil > 0);
    }

    #[test]
    fn corrupt_always_changes_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in ["ab", "kavor", "x"] {
            for _ in 0..50 {
                assert_ne!(corrupt(w, &mut rng), w);
            }
        }
    }

    #[test]
    fn rejects_zero_sizes() {
        assert!(synth_generate(&SynthConfig { entities: 0, ..Default::default() }).is_err());
    }
}
