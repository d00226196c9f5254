//! Model combination: token-level voting over recognizer outputs and
//! weighted fusion of retrieval and ranker scores.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{bio_repair, Tag, TagSequence};
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::registry::{params_or_default, Registry};

const DEFAULT_PRIORITY: [Tag; 3] = [Tag::B, Tag::I, Tag::O];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoteConfig {
    /// Registry name: `f1` or `recall`.
    pub strategy: String,
    /// Share of `O` votes needed for `O` to win; read by `recall` only.
    pub o_threshold: f64,
    /// Tie order, strongest first.
    pub priority: Vec<Tag>,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            strategy: "f1".into(),
            o_threshold: 0.7,
            priority: DEFAULT_PRIORITY.to_vec(),
        }
    }
}

impl VoteConfig {
    pub fn recall(o_threshold: f64) -> Self {
        VoteConfig {
            strategy: "recall".into(),
            o_threshold,
            ..Default::default()
        }
    }
}

/// Picks one tag from the vote counts at a single position.
pub trait VoteStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// `counts` is indexed by [`Tag::index`]; `n` is the number of voters.
    fn pick(&self, counts: [usize; 3], n: usize) -> Tag;
}

fn validate_priority(priority: &[Tag]) -> Result<()> {
    let mut sorted = priority.to_vec();
    sorted.sort_unstable();
    if sorted != [Tag::O, Tag::B, Tag::I] {
        return Err(Error::InvalidArgument(format!(
            "tie priority must list O, B and I once each, got {priority:?}"
        )));
    }
    Ok(())
}

/// Most votes among `allowed`, ties to the earlier tag in `priority`.
fn plurality(counts: [usize; 3], priority: &[Tag], allowed: impl Fn(Tag) -> bool) -> Tag {
    let mut best: Option<Tag> = None;
    for &t in priority.iter().filter(|&&t| allowed(t)) {
        if best.map_or(true, |b| counts[t.index()] > counts[b.index()]) {
            best = Some(t);
        }
    }
    best.unwrap_or(Tag::O)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct PluralityVote {
    priority: Vec<Tag>,
}

impl Default for PluralityVote {
    fn default() -> Self {
        PluralityVote {
            priority: DEFAULT_PRIORITY.to_vec(),
        }
    }
}

impl VoteStrategy for PluralityVote {
    fn name(&self) -> &'static str {
        "f1"
    }

    fn pick(&self, counts: [usize; 3], _n: usize) -> Tag {
        plurality(counts, &self.priority, |_| true)
    }
}

/// `O` only on a qualified majority, otherwise the best non-`O` tag.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct RecallVote {
    o_threshold: f64,
    priority: Vec<Tag>,
}

impl Default for RecallVote {
    fn default() -> Self {
        RecallVote {
            o_threshold: 0.7,
            priority: DEFAULT_PRIORITY.to_vec(),
        }
    }
}

impl VoteStrategy for RecallVote {
    fn name(&self) -> &'static str {
        "recall"
    }

    fn pick(&self, counts: [usize; 3], n: usize) -> Tag {
        let o_share = counts[Tag::O.index()] as f64 / n.max(1) as f64;
        if o_share >= self.o_threshold || counts[Tag::B.index()] + counts[Tag::I.index()] == 0 {
            Tag::O
        } else {
            plurality(counts, &self.priority, |t| t != Tag::O)
        }
    }
}

pub fn vote_strategy_registry() -> Registry<dyn VoteStrategy> {
    fn f1(p: &serde_json::Value) -> Result<Box<dyn VoteStrategy>> {
        let s: PluralityVote = params_or_default(p)?;
        validate_priority(&s.priority)?;
        Ok(Box::new(s))
    }
    fn recall(p: &serde_json::Value) -> Result<Box<dyn VoteStrategy>> {
        let s: RecallVote = params_or_default(p)?;
        validate_priority(&s.priority)?;
        if !(s.o_threshold > 0.0 && s.o_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("O threshold must be in (0, 1], got {}", s.o_threshold)));
        }
        Ok(Box::new(s))
    }
    Registry::new("vote strategy").with("f1", f1).with("recall", recall)
}

/// Token-wise vote over `sequences` followed by BIO repair.
pub fn vote(sequences: &[TagSequence], cfg: &VoteConfig) -> Result<TagSequence> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::InvalidArgument("voting needs at least one sequence".into()))?;
    if let Some(bad) = sequences.iter().find(|s| s.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            actual: bad.len(),
        });
    }
    let strategy = vote_strategy_registry().create(&cfg.strategy, &serde_json::to_value(cfg)?)?;
    let mut out: TagSequence = (0..first.len())
        .map(|i| {
            let mut counts = [0usize; 3];
            for s in sequences {
                counts[s[i].index()] += 1;
            }
            strategy.pick(counts, sequences.len())
        })
        .collect();
    bio_repair(&mut out);
    Ok(out)
}

/// Normalized weights of the retrieval score family and of each ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub retrieval: f64,
    pub rankers: Vec<f64>,
}

impl FusionWeights {
    /// Validates and rescales to sum 1.
    pub fn new(retrieval: f64, rankers: Vec<f64>) -> Result<Self> {
        let all = std::iter::once(retrieval).chain(rankers.iter().copied());
        if all.clone().any(|w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidArgument("fusion weights must be finite and non-negative".into()));
        }
        let total: f64 = all.sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("at least one fusion weight must be positive".into()));
        }
        Ok(FusionWeights {
            retrieval: retrieval / total,
            rankers: rankers.into_iter().map(|w| w / total).collect(),
        })
    }

    /// 0.3 on retrieval, the rest split evenly across `models` rankers.
    pub fn default_for(models: usize) -> Result<Self> {
        if models == 0 {
            return Err(Error::InvalidArgument("fusion needs at least one ranker".into()));
        }
        FusionWeights::new(0.3, vec![0.7 / models as f64; models])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedCandidate {
    pub entity_id: String,
    pub score: f64,
}

/// Re-ranks one candidate list by `w_r·softmax(retrieval) + Σ w_j·softmax(ranker_j)`.
///
/// Every list holds `(entity id, raw score)` for the same id set, in any
/// order. Output is sorted by fused score, then by the weighted raw scores
/// (only to separate values softmax rounded together), then by id.
pub fn hybrid_rank(
    retrieval: &[(String, f64)],
    rankers: &[Vec<(String, f64)>],
    weights: &FusionWeights,
) -> Result<Vec<FusedCandidate>> {
    if rankers.len() != weights.rankers.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.rankers.len(),
            actual: rankers.len(),
        });
    }
    let position: HashMap<&str, usize> = retrieval.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    if position.len() != retrieval.len() {
        return Err(Error::InvalidArgument("duplicate id in the retrieval list".into()));
    }
    let n = retrieval.len();
    let mut fused = vec![0.0; n];
    let mut raw = vec![0.0; n];
    let mut accumulate = |scores: &[f64], w: f64| {
        for (i, p) in softmax(scores).into_iter().enumerate() {
            fused[i] += w * p;
            raw[i] += w * scores[i];
        }
    };
    let base: Vec<f64> = retrieval.iter().map(|(_, s)| *s).collect();
    accumulate(&base, weights.retrieval);
    for (j, list) in rankers.iter().enumerate() {
        let mut aligned = vec![f64::NAN; n];
        for (id, s) in list {
            let i = *position
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("ranker {j} scores {id:?}, which retrieval did not return")))?;
            if !aligned[i].is_nan() {
                return Err(Error::InvalidArgument(format!("ranker {j} scores {id:?} twice")));
            }
            aligned[i] = *s;
        }
        if list.len() != n || aligned.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument(format!("ranker {j} candidate set differs from retrieval")));
        }
        accumulate(&aligned, weights.rankers[j]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        fused[b]
            .total_cmp(&fused[a])
            .then(raw[b].total_cmp(&raw[a]))
            .then_with(|| retrieval[a].0.cmp(&retrieval[b].0))
    });
    Ok(order
        .into_iter()
        .map(|i| FusedCandidate {
            entity_id: retrieval[i].0.clone(),
            score: fused[i],
        })
        .collect())
}

/// Model pool for ensemble runs. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    /// Recognizer parameter files.
    #[serde(default)]
    pub ner_models: Vec<PathBuf>,
    #[serde(default)]
    pub vote: VoteConfig,
    /// Linker model directories. The first one also supplies the candidate
    /// lists every ranker scores.
    #[serde(default)]
    pub linker_models: Vec<PathBuf>,
    /// Defaults to [`FusionWeights::default_for`] over `linker_models`.
    #[serde(default)]
    pub fusion: Option<FusionWeights>,
}

impl EnsembleManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: EnsembleManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in m.ner_models.iter_mut().chain(m.linker_models.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(f) = &m.fusion {
            m.fusion = Some(FusionWeights::new(f.retrieval, f.rankers.clone())?);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Fusion weights to use, checked against the number of linkers.
    pub fn fusion_weights(&self) -> Result<FusionWeights> {
        match &self.fusion {
            Some(w) if w.rankers.len() != self.linker_models.len() => Err(Error::InvalidArgument(format!(
                "{} ranker weights for {} linker models",
                w.rankers.len(),
                self.linker_models.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => FusionWeights::default_for(self.linker_models.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::is_bio_valid;
    use proptest::prelude::*;
    use Tag::{B, I, O};

    fn column(tags: &[Tag], cfg: &VoteConfig) -> Tag {
        let seqs: Vec<TagSequence> = tags.iter().map(|&t| vec![B, t]).collect();
        vote(&seqs, cfg).unwrap()[1]
    }

    #[test]
    fn plurality_wins_under_f1() {
        let seqs = vec![vec![B], vec![B], vec![O]];
        assert_eq!(vote(&seqs, &VoteConfig::default()).unwrap(), vec![B]);
    }

    #[test]
    fn o_needs_qualified_majority_under_recall() {
        // 2 of 3 is 0.667, short of 0.7.
        let seqs = vec![vec![O], vec![O], vec![B]];
        assert_eq!(vote(&seqs, &VoteConfig::recall(0.7)).unwrap(), vec![B]);
        assert_eq!(vote(&seqs, &VoteConfig::default()).unwrap(), vec![O]);
        assert_eq!(vote(&seqs, &VoteConfig::recall(0.6)).unwrap(), vec![O]);
    }

    #[test]
    fn low_threshold_can_add_o() {
        // O share 0.5 clears θ = 1/4 + ε, while plurality breaks the O/I tie toward I.
        let seqs = vec![vec![O], vec![I], vec![O], vec![I]];
        assert_eq!(vote(&seqs, &VoteConfig::recall(0.25 + 1e-9)).unwrap(), vec![O]);
        assert_eq!(vote(&seqs, &VoteConfig::default()).unwrap(), vec![B]);
    }

    #[test]
    fn ties_follow_priority() {
        assert_eq!(column(&[B, I], &VoteConfig::default()), B);
        assert_eq!(column(&[I, O], &VoteConfig::default()), I);
        assert_eq!(column(&[O, O, I, I, B], &VoteConfig::recall(0.7)), I);
        assert_eq!(column(&[O, O, I, B], &VoteConfig::recall(0.7)), B);
    }

    #[test]
    fn single_model_is_identity_up_to_repair() {
        let seq = vec![O, I, I, O, B, I];
        let out = vote(std::slice::from_ref(&seq), &VoteConfig::default()).unwrap();
        assert_eq!(out, vec![O, B, I, O, B, I]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(vote(&[], &VoteConfig::default()).is_err());
        assert!(vote(&[vec![O], vec![O, B]], &VoteConfig::default()).is_err());
        assert!(vote(&[vec![O]], &VoteConfig::recall(0.0)).is_err());
        let unknown = VoteConfig {
            strategy: "borda".into(),
            ..Default::default()
        };
        assert!(vote(&[vec![O]], &unknown).is_err());
        let bad_priority = VoteConfig {
            priority: vec![B, B, O],
            ..Default::default()
        };
        assert!(vote(&[vec![O]], &bad_priority).is_err());
    }

    fn tag() -> impl Strategy<Value = Tag> {
        prop_oneof![Just(O), Just(B), Just(I)]
    }

    proptest! {
        #[test]
        // Above one half an O share that clears θ is a strict majority, which
        // plurality voting also turns into O.
        fn outputs_are_valid_and_recall_keeps_more_tokens(
            seqs in (1usize..8, 1usize..7).prop_flat_map(|(len, n)| {
                prop::collection::vec(prop::collection::vec(tag(), len), n)
            }),
            theta in 0.500_001f64..=1.0,
        ) {
            let f1 = vote(&seqs, &VoteConfig::default()).unwrap();
            let recall = vote(&seqs, &VoteConfig::recall(theta)).unwrap();
            prop_assert!(is_bio_valid(&f1) && is_bio_valid(&recall));
            let o = |s: &[Tag]| s.iter().filter(|&&t| t == O).count();
            prop_assert!(o(&recall) <= o(&f1));
        }
    }

    fn list(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(i, s)| (i.to_string(), *s)).collect()
    }

    fn ids(c: &[FusedCandidate]) -> Vec<&str> {
        c.iter().map(|c| c.entity_id.as_str()).collect()
    }

    #[test]
    fn single_family_weights_reproduce_that_family() {
        let retrieval = list(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]);
        let ranker = list(&[("c", 3.0), ("a", -1.0), ("b", 2.0)]);
        let only_ranker = FusionWeights::new(0.0, vec![1.0]).unwrap();
        let fused = hybrid_rank(&retrieval, &[ranker.clone()], &only_ranker).unwrap();
        assert_eq!(ids(&fused), ["c", "b", "a"]);
        let p = softmax(&[-1.0, 2.0, 3.0]);
        assert_eq!(fused[0].score, p[2]);
        let only_retrieval = FusionWeights::new(1.0, vec![0.0]).unwrap();
        assert_eq!(ids(&hybrid_rank(&retrieval, &[ranker], &only_retrieval).unwrap()), ["a", "b", "c"]);
    }

    #[test]
    fn mirrored_rankers_tie_and_fall_back_to_id() {
        let retrieval = list(&[("y", 0.0), ("x", 0.0)]);
        let up = list(&[("x", 1.0), ("y", 0.0)]);
        let down = list(&[("x", 0.0), ("y", 1.0)]);
        let w = FusionWeights::new(0.0, vec![1.0, 1.0]).unwrap();
        let fused = hybrid_rank(&retrieval, &[up, down], &w).unwrap();
        assert_eq!(ids(&fused), ["x", "y"]);
        assert_eq!(fused[0].score, fused[1].score);
        assert!((fused[0].score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shifting_one_family_keeps_the_winner() {
        let retrieval = list(&[("a", 0.2), ("b", 0.7), ("c", 0.4)]);
        let ranker = list(&[("a", 1.5), ("b", 0.1), ("c", 1.2)]);
        let shifted: Vec<_> = ranker.iter().map(|(i, s)| (i.clone(), s + 40.0)).collect();
        let w = FusionWeights::default_for(1).unwrap();
        let a = hybrid_rank(&retrieval, &[ranker], &w).unwrap();
        let b = hybrid_rank(&retrieval, &[shifted], &w).unwrap();
        assert_eq!(a[0].entity_id, b[0].entity_id);
    }

    #[test]
    fn mismatched_sets_are_errors() {
        let retrieval = list(&[("a", 0.2), ("b", 0.7)]);
        let w = FusionWeights::default_for(1).unwrap();
        assert!(hybrid_rank(&retrieval, &[list(&[("a", 1.0)])], &w).is_err());
        assert!(hybrid_rank(&retrieval, &[list(&[("a", 1.0), ("z", 0.0)])], &w).is_err());
        assert!(hybrid_rank(&retrieval, &[list(&[("a", 1.0), ("a", 0.0)])], &w).is_err());
        assert!(hybrid_rank(&retrieval, &[], &w).is_err());
    }

    #[test]
    fn weights_are_normalized_and_checked() {
        let w = FusionWeights::new(1.0, vec![1.0, 2.0]).unwrap();
        assert_eq!(w.retrieval, 0.25);
        assert_eq!(w.rankers, vec![0.25, 0.5]);
        assert!(FusionWeights::new(0.0, vec![0.0]).is_err());
        assert!(FusionWeights::new(-1.0, vec![2.0]).is_err());
        let d = FusionWeights::default_for(2).unwrap();
        assert!((d.retrieval - 0.3).abs() < 1e-15 && (d.rankers[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.json");
        fs::write(
            &path,
            r#"{"ner_models": ["a/ner.bin", "/abs/ner.bin"], "vote": {"strategy": "recall"}, "linker_models": ["l1"]}"#,
        )
        .unwrap();
        let m = EnsembleManifest::load(&path).unwrap();
        assert_eq!(m.ner_models[0], dir.path().join("a/ner.bin"));
        assert_eq!(m.ner_models[1], PathBuf::from("/abs/ner.bin"));
        assert_eq!(m.vote.o_threshold, 0.7);
        assert_eq!(m.fusion_weights().unwrap().rankers, vec![0.7]);
    }
}
