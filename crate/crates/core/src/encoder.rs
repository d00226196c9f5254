//! Hashed character n-gram encoders for the sentence side and the entity side.
//!
//! An encoder mean-pools embedding rows of the hashed features of its input,
//! applies a square projection and L2-normalizes, so every output is a unit
//! vector and `dot_score` stays in `[-1, 1]`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_64_with_seed, Xxh3};

use crate::error::{Error, Result};
use crate::math;
use crate::optim::{AdamConfig, DenseAdam, RowAdam};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    /// Character n-gram lengths, taken over `<token>` with boundary markers.
    pub ngram_sizes: Vec<usize>,
    pub word_unigrams: bool,
    pub buckets: u32,
    pub seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            ngram_sizes: vec![3, 4, 5],
            word_unigrams: true,
            buckets: 1 << 18,
            seed: 0x5eed_f00d,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.buckets < 2 {
            return Err(Error::InvalidArgument("buckets must be at least 2".into()));
        }
        if self.ngram_sizes.contains(&0) {
            return Err(Error::InvalidArgument("n-gram size 0".into()));
        }
        Ok(())
    }

    fn bucket(&self, bytes: &[u8]) -> u32 {
        (xxh3_64_with_seed(bytes, self.seed) % self.buckets as u64) as u32
    }
}

/// Multiset of hashed feature ids, sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureCounts(Vec<(u32, u32)>);

impl FeatureCounts {
    pub fn from_ids(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => out.push((id, 1)),
            }
        }
        FeatureCounts(out)
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().map(|(_, c)| c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, id: u32) -> u32 {
        self.0
            .binary_search_by_key(&id, |&(f, _)| f)
            .map(|i| self.0[i].1)
            .unwrap_or(0)
    }

    /// Multiset union.
    pub fn merged(&self, other: &FeatureCounts) -> FeatureCounts {
        let mut ids = Vec::with_capacity((self.total() + other.total()) as usize);
        for &(f, c) in self.0.iter().chain(other.0.iter()) {
            ids.extend(std::iter::repeat(f).take(c as usize));
        }
        FeatureCounts::from_ids(ids)
    }
}

pub fn word_feature(spec: &FeatureSpec, token: &str) -> u32 {
    let mut buf = Vec::with_capacity(token.len() + 2);
    buf.extend_from_slice(b"w:");
    buf.extend_from_slice(token.to_lowercase().as_bytes());
    spec.bucket(&buf)
}

fn push_token_features(spec: &FeatureSpec, token: &str, out: &mut Vec<u32>) {
    let lower = token.to_lowercase();
    if spec.word_unigrams {
        out.push(word_feature(spec, &lower));
    }
    let chars: Vec<char> = std::iter::once('<')
        .chain(lower.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut buf = String::new();
    for &n in &spec.ngram_sizes {
        if chars.len() < n {
            continue;
        }
        for w in chars.windows(n) {
            buf.clear();
            buf.push_str(&n.to_string());
            buf.push(':');
            buf.extend(w.iter());
            out.push(spec.bucket(buf.as_bytes()));
        }
    }
}

pub fn featurize<S: AsRef<str>>(spec: &FeatureSpec, tokens: &[S]) -> FeatureCounts {
    let mut ids = Vec::new();
    for t in tokens {
        push_token_features(spec, t.as_ref(), &mut ids);
    }
    FeatureCounts::from_ids(ids)
}

/// Unit-norm output of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Normalizes `values`; a zero or empty input maps to the basis vector e0.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = math::l2_norm(&values);
        if norm > 0.0 && norm.is_finite() {
            DenseVector(values.into_iter().map(|v| v / norm).collect())
        } else {
            DenseVector::basis(values.len().max(1))
        }
    }

    pub fn basis(dim: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        DenseVector(v)
    }

    /// Wraps values that are already unit-norm (index rows, decoded files).
    pub fn from_unit(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn dot_score(s: &DenseVector, e: &DenseVector) -> Result<f64> {
    if s.dim() != e.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            actual: e.dim(),
        });
    }
    Ok(math::dot(&s.0, &e.0))
}

/// Anything that maps tokens to a unit vector. Retrieval and linking only
/// depend on this, so a contextual encoder can replace the hashed default.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_tokens(&self, tokens: &[String]) -> Result<DenseVector>;
    /// Identifies the parameters; indexes record it to detect staleness.
    fn fingerprint(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Sentence,
    Entity,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Sentence => f.write_str("sentence"),
            Side::Entity => f.write_str("entity"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: FeatureSpec,
    pub dim: usize,
    pub side: Side,
    /// `buckets × dim`, row-major.
    pub embedding: Vec<f64>,
    /// `dim × dim`, row-major.
    pub projection: Vec<f64>,
}

/// Forward intermediates needed by `EncoderParams::backward`.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub vector: DenseVector,
    mean: Vec<f64>,
    norm: f64,
    degenerate: bool,
}

impl EncodeCache {
    pub fn vector(&self) -> &DenseVector {
        &self.vector
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncoderGrad {
    pub projection: Vec<f64>,
    pub rows: HashMap<u32, Vec<f64>>,
}

impl EncoderGrad {
    pub fn new(dim: usize) -> Self {
        EncoderGrad {
            projection: vec![0.0; dim * dim],
            rows: HashMap::new(),
        }
    }

    pub fn clear(&mut self) {
        self.projection.iter_mut().for_each(|g| *g = 0.0);
        self.rows.clear();
    }

    pub fn scale(&mut self, k: f64) {
        self.projection.iter_mut().for_each(|g| *g *= k);
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|g| *g *= k);
        }
    }
}

impl EncoderParams {
    /// Embedding rows uniform in `[-1, 1)` from `init_seed`, identity projection.
    pub fn new(spec: FeatureSpec, dim: usize, side: Side, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        if dim < 2 {
            return Err(Error::InvalidArgument("encoder dimension must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let embedding = (0..spec.buckets as usize * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        Ok(EncoderParams {
            spec,
            dim,
            side,
            embedding,
            projection,
        })
    }

    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> FeatureCounts {
        featurize(&self.spec, tokens)
    }

    pub fn row(&self, f: u32) -> &[f64] {
        &self.embedding[f as usize * self.dim..(f as usize + 1) * self.dim]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<DenseVector> {
        Ok(self.forward(&self.featurize(tokens))?.vector)
    }

    pub fn encode_features(&self, feats: &FeatureCounts) -> Result<DenseVector> {
        Ok(self.forward(feats)?.vector)
    }

    pub fn forward(&self, feats: &FeatureCounts) -> Result<EncodeCache> {
        let d = self.dim;
        if feats.is_empty() {
            return Ok(EncodeCache {
                vector: DenseVector::basis(d),
                mean: vec![0.0; d],
                norm: 0.0,
                degenerate: true,
            });
        }
        let total = feats.total() as f64;
        let mut mean = vec![0.0; d];
        for &(f, c) in feats.entries() {
            if f >= self.spec.buckets {
                return Err(Error::InvalidArgument(format!("feature {f} outside bucket range")));
            }
            let w = c as f64 / total;
            for (m, r) in mean.iter_mut().zip(self.row(f)) {
                *m += w * r;
            }
        }
        let mut h = vec![0.0; d];
        for (i, hi) in h.iter_mut().enumerate() {
            *hi = math::dot(&self.projection[i * d..(i + 1) * d], &mean);
        }
        let norm = math::l2_norm(&h);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("{} encoder parameters", self.side)));
        }
        if norm == 0.0 {
            return Ok(EncodeCache {
                vector: DenseVector::basis(d),
                mean,
                norm,
                degenerate: true,
            });
        }
        Ok(EncodeCache {
            vector: DenseVector(h.into_iter().map(|x| x / norm).collect()),
            mean,
            norm,
            degenerate: false,
        })
    }

    /// Accumulates `∂L/∂params` given `∂L/∂v` for an output produced by `forward`.
    pub fn backward(
        &self,
        feats: &FeatureCounts,
        cache: &EncodeCache,
        grad_v: &[f64],
        grad: &mut EncoderGrad,
    ) {
        if cache.degenerate {
            return;
        }
        let d = self.dim;
        let v = cache.vector.as_slice();
        let along = math::dot(v, grad_v);
        let grad_h: Vec<f64> = (0..d)
            .map(|i| (grad_v[i] - along * v[i]) / cache.norm)
            .collect();
        let mut grad_mean = vec![0.0; d];
        for i in 0..d {
            let gh = grad_h[i];
            if gh == 0.0 {
                continue;
            }
            let prow = &self.projection[i * d..(i + 1) * d];
            let grow = &mut grad.projection[i * d..(i + 1) * d];
            for j in 0..d {
                grow[j] += gh * cache.mean[j];
                grad_mean[j] += gh * prow[j];
            }
        }
        let total = feats.total() as f64;
        for &(f, c) in feats.entries() {
            let w = c as f64 / total;
            let row = grad.rows.entry(f).or_insert_with(|| vec![0.0; d]);
            for (r, g) in row.iter_mut().zip(&grad_mean) {
                *r += w * g;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.embedding.iter().chain(&self.projection).all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{} encoder parameters", self.side)))
        }
    }

    pub fn compute_fingerprint(&self) -> u64 {
        let mut h = Xxh3::new();
        h.update(&(self.dim as u64).to_le_bytes());
        h.update(&[self.side as u8]);
        h.update(&self.spec.seed.to_le_bytes());
        for x in self.embedding.iter().chain(&self.projection) {
            h.update(&x.to_le_bytes());
        }
        h.digest()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Layout (little-endian): magic, version u32, dim u32, buckets u32,
    /// side u8, hash seed u64, word-unigram flag u8, n-gram count u32,
    /// n-gram sizes u32…, embedding f64 row-major, projection f64 row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.spec.buckets.to_le_bytes())?;
        w.write_all(&[match self.side {
            Side::Sentence => 0u8,
            Side::Entity => 1u8,
        }])?;
        w.write_all(&self.spec.seed.to_le_bytes())?;
        w.write_all(&[self.spec.word_unigrams as u8])?;
        w.write_all(&(self.spec.ngram_sizes.len() as u32).to_le_bytes())?;
        for &n in &self.spec.ngram_sizes {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for x in self.embedding.iter().chain(&self.projection) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::io("<reader>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::BadParamFile("bad magic".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != PARAM_VERSION {
            return Err(Error::BadParamFile(format!("unsupported version {version}")));
        }
        let dim = read_u32(r).map_err(io)? as usize;
        let buckets = read_u32(r).map_err(io)?;
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(io)?;
        let side = match byte[0] {
            0 => Side::Sentence,
            1 => Side::Entity,
            other => return Err(Error::BadParamFile(format!("bad side tag {other}"))),
        };
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(io)?;
        r.read_exact(&mut byte).map_err(io)?;
        let word_unigrams = byte[0] != 0;
        let n_sizes = read_u32(r).map_err(io)? as usize;
        if n_sizes > 64 {
            return Err(Error::BadParamFile("too many n-gram sizes".into()));
        }
        let mut ngram_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            ngram_sizes.push(read_u32(r).map_err(io)? as usize);
        }
        let spec = FeatureSpec {
            ngram_sizes,
            word_unigrams,
            buckets,
            seed: u64::from_le_bytes(seed),
        };
        spec.validate()?;
        if dim < 2 {
            return Err(Error::BadParamFile(format!("dimension {dim}")));
        }
        let embedding = read_f64s(r, buckets as usize * dim).map_err(io)?;
        let projection = read_f64s(r, dim * dim).map_err(io)?;
        let params = EncoderParams {
            spec,
            dim,
            side,
            embedding,
            projection,
        };
        params.check_finite()?;
        Ok(params)
    }
}

const PARAM_MAGIC: &[u8; 8] = b"ELENCPRM";
const PARAM_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl TextEncoder for EncoderParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_tokens(&self, tokens: &[String]) -> Result<DenseVector> {
        self.encode(tokens)
    }

    fn fingerprint(&self) -> u64 {
        self.compute_fingerprint()
    }
}

/// Adam state for one encoder.
#[derive(Debug, Clone)]
pub struct EncoderOptimizer {
    pub cfg: AdamConfig,
    projection: DenseAdam,
    rows: RowAdam,
}

impl EncoderOptimizer {
    pub fn new(params: &EncoderParams, cfg: AdamConfig) -> Self {
        EncoderOptimizer {
            cfg,
            projection: DenseAdam::new(params.dim * params.dim),
            rows: RowAdam::new(params.dim),
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grad: &EncoderGrad) -> Result<()> {
        if grad.projection.len() != params.projection.len() {
            return Err(Error::DimensionMismatch {
                expected: params.projection.len(),
                actual: grad.projection.len(),
            });
        }
        self.projection
            .step(&mut params.projection, &grad.projection, &self.cfg)?;
        self.rows.step(&mut params.embedding, &grad.rows, &self.cfg)
    }
}
