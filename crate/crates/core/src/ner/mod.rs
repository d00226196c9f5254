//! Mention recognition conditioned on document context and retrieved
//! candidate entities, decoded with a linear-chain CRF.

pub mod crf;
pub mod features;
mod model;

pub use crf::{crf_log_partition, crf_nll, viterbi, CrfNll, CrfParams, Emissions};
pub use features::{compose_input, knowledge_features, ComposedInput, KnowledgeFeatures, TokenKnowledge};
pub use model::{
    drop_gold_candidates, evaluate_ner, prepare_input, prepare_inputs, train_ner, NerConfig, NerEpochLog, NerInput, NerModel,
    SpanRecord,
};
