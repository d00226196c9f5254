//! Mention linking: per-mention dense retrieval, an interaction ranker
//! trained on sampled candidate lists, and NIL / ERROR sentinels.

pub mod features;
pub mod loss;
mod model;
pub mod sampling;

pub use features::{
    interaction_features, retrieve_for_mention, CandidateEntry, CandidateList, ListOptions, MentionContext, NameVocabulary,
    FEATURE_NAMES, NUM_FEATURES,
};
pub use loss::{kl_divergence, listwise_kl_loss, pointwise_bce_loss, ranking_loss_registry, RankingLoss};
pub use model::{
    decide, spurious_spans, train_linker, train_mention_encoder, train_ranker, training_mentions, Decision,
    DroppedRecord, LabeledMention, LinkRecord, Linker, LinkerConfig, LinkerEpochLog, Ranker, TrainedLinker,
};
pub use sampling::{candidate_sampler_registry, dynamic_sample, CandidateSampler};
