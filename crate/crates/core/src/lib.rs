//! Three-stage speech entity linking: candidate retrieval without mentions,
//! knowledge-enhanced CRF mention recognition, and linking with NIL / ERROR
//! filtering, plus ensembling and an end-to-end pipeline.

pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod kb;
pub mod linker;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod ner;
pub mod optim;
mod persist;
pub mod pipeline;
pub mod registry;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
