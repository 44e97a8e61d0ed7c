//! Two-stage ads recommendation: siamese retrieval over an inner-product
//! index, then ranking with disentangled ad embeddings that attend over
//! cached user hidden states. Includes a cross-encoder baseline, the
//! global-then-local contrastive training pipeline, serving with a
//! forward-pass ledger, and Hit@N evaluation.

pub mod ann;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod heads;
pub mod pipeline;
pub mod serving;
pub mod train;

pub use config::{EncoderConfig, ModelConfig, RunConfig, TrainConfig};
pub use corpus::{Corpus, SyntheticSpec};
pub use encoder::{Encoder, HiddenStates};
pub use error::{Error, Result};
pub use heads::{AdEncoding, HybridModel};
