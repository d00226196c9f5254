//! Knowledge base loading, alias indexing and the NIL / ERROR sentinels.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NIL_ID: &str = "__NIL__";
pub const ERROR_ID: &str = "__ERROR__";

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const NIL_TOKEN: &str = "[NIL]";
pub const ERROR_TOKEN: &str = "[ERROR]";

/// Which shared-task track a store (and everything downstream) is built for.
/// Track 2 links gold mentions only, so it never carries the ERROR sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Track1,
    Track2,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Track1 => f.write_str("track1"),
            Mode::Track2 => f.write_str("track2"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "track1" => Ok(Mode::Track1),
            "track2" => Ok(Mode::Track2),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub description: String,
}

impl EntityRecord {
    pub fn is_sentinel(&self) -> bool {
        is_sentinel_id(&self.id)
    }
}

pub fn is_sentinel_id(id: &str) -> bool {
    id == NIL_ID || id == ERROR_ID
}

/// Case-fold and collapse runs of whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    normalize(
        &tokens
            .iter()
            .map(|t| t.as_ref())
            .collect::<Vec<_>>()
            .join(" "),
    )
}

fn whitespace_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_owned)
}

/// Token layout of an entity as seen by the entity-side encoder:
/// title, then aliases, then description, separated by `[SEP]`.
/// Sentinels collapse to a single literal token.
pub fn entity_text(e: &EntityRecord) -> Vec<String> {
    match e.id.as_str() {
        NIL_ID => return vec![NIL_TOKEN.to_owned()],
        ERROR_ID => return vec![ERROR_TOKEN.to_owned()],
        _ => {}
    }
    let mut out: Vec<String> = whitespace_tokens(&e.title).collect();
    out.push(SEP.to_owned());
    for alias in &e.aliases {
        out.extend(whitespace_tokens(alias));
    }
    out.push(SEP.to_owned());
    out.extend(whitespace_tokens(&e.description));
    out
}

/// Immutable knowledge base. Records keep file order; sentinels follow.
#[derive(Debug, Clone, PartialEq)]
pub struct KbStore {
    records: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
    alias_index: HashMap<String, BTreeSet<usize>>,
    mode: Mode,
    n_regular: usize,
}

impl KbStore {
    pub fn from_records(records: Vec<EntityRecord>, mode: Mode) -> Result<Self> {
        let mut store = KbStore {
            records: Vec::with_capacity(records.len() + 2),
            by_id: HashMap::with_capacity(records.len() + 2),
            alias_index: HashMap::new(),
            mode,
            n_regular: 0,
        };
        for (i, rec) in records.into_iter().enumerate() {
            store.push_regular(rec).map_err(|e| match e {
                Error::InvalidRecord(m) => Error::InvalidRecord(format!("record {}: {m}", i + 1)),
                other => other,
            })?;
        }
        store.push_sentinels();
        Ok(store)
    }

    fn push_regular(&mut self, rec: EntityRecord) -> Result<()> {
        if rec.is_sentinel() {
            return Err(Error::InvalidRecord(format!("reserved id {:?}", rec.id)));
        }
        if rec.id.is_empty() {
            return Err(Error::InvalidRecord("empty id".into()));
        }
        if rec.title.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("empty title for {:?}", rec.id)));
        }
        if self.by_id.contains_key(&rec.id) {
            return Err(Error::InvalidRecord(format!("duplicate id {:?}", rec.id)));
        }
        let idx = self.records.len();
        for surface in std::iter::once(&rec.title).chain(rec.aliases.iter()) {
            let key = normalize(surface);
            if !key.is_empty() {
                self.alias_index.entry(key).or_default().insert(idx);
            }
        }
        self.by_id.insert(rec.id.clone(), idx);
        self.records.push(rec);
        self.n_regular += 1;
        Ok(())
    }

    fn push_sentinels(&mut self) {
        let mut sentinels = vec![(NIL_ID, NIL_TOKEN)];
        if self.mode == Mode::Track1 {
            sentinels.push((ERROR_ID, ERROR_TOKEN));
        }
        for (id, title) in sentinels {
            self.by_id.insert(id.to_owned(), self.records.len());
            self.records.push(EntityRecord {
                id: id.to_owned(),
                title: title.to_owned(),
                aliases: Vec::new(),
                description: String::new(),
            });
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of entities including sentinels.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_regular(&self) -> usize {
        self.n_regular
    }

    /// All records, file order first, sentinels last.
    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    /// Non-sentinel records in file order.
    pub fn regular(&self) -> &[EntityRecord] {
        &self.records[..self.n_regular]
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Ids whose normalized title or alias equals the normalized surface.
    pub fn alias_candidates<S: AsRef<str>>(&self, surface: &[S]) -> BTreeSet<&str> {
        self.alias_lookup(&normalize_tokens(surface))
            .iter()
            .map(|&i| self.records[i].id.as_str())
            .collect()
    }

    /// Record indices for an already-normalized surface string.
    pub fn alias_lookup(&self, normalized: &str) -> &BTreeSet<usize> {
        static EMPTY: BTreeSet<usize> = BTreeSet::new();
        self.alias_index.get(normalized).unwrap_or(&EMPTY)
    }

    pub fn alias_index(&self) -> &HashMap<String, BTreeSet<usize>> {
        &self.alias_index
    }
}

/// Loads a JSON-lines KB file. Blank lines are skipped.
pub fn load_kb(path: impl AsRef<Path>, mode: Mode) -> Result<KbStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EntityRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.is_sentinel() {
            return Err(Error::ReservedId {
                path: path.to_owned(),
                line: line_no,
                id: rec.id,
            });
        }
        if rec.id.is_empty() || rec.title.trim().is_empty() {
            return Err(Error::Malformed {
                path: path.to_owned(),
                line: line_no,
                message: "id and title must be non-empty".into(),
            });
        }
        if seen.insert(rec.id.clone(), line_no).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                line: line_no,
                id: rec.id,
            });
        }
        records.push(rec);
    }
    KbStore::from_records(records, mode)
}

/// Writes records as JSON lines (the KB file format).
pub fn write_kb(path: impl AsRef<Path>, records: &[EntityRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
