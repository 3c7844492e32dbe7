//! Training-free two-stage pruning for video LLM inference.
//!
//! The visual stage ([`visual`]) drops redundant video tokens before they
//! reach the decoder, using per-token spatio-temporal dissimilarity scores and
//! a per-frame retention ratio derived from inter-frame change. The memory
//! stage ([`memory`]) profiles how far each decoder layer's visual hidden
//! states have drifted from the original visual features and evicts the
//! visual KV-cache entries of layers that have drifted past a threshold.
//!
//! Neither stage reads attention weights, so both work with fused attention
//! kernels that never materialize them. A small deterministic decoder
//! ([`decoder`]) provides the hidden states and KV cache for end-to-end runs
//! ([`pipeline`]).

pub mod bench;
pub mod cache;
pub mod decoder;
pub mod math;
pub mod memory;
pub mod pipeline;
pub mod registry;
pub mod synth;
pub mod tensor_io;
pub mod visual;

use thiserror::Error;

pub use cache::{KvCacheLayer, LayeredKvCache, Segment, SegmentedSequence};
pub use decoder::{Decoder, DecoderConfig};
pub use memory::{DegradationProfile, DiscardPlan, EvictionPolicy};
pub use pipeline::{run_pipeline, Prompt, RunReport, SharpvConfig};
pub use registry::{StrategyParams, StrategyRegistry};
pub use synth::{gen_synthetic_video, Pattern, SyntheticVideoSpec};
pub use visual::{
    prune_video, PruneConfig, RetentionPlan, SelectionMode, TokenSelector, VideoTokens,
};

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Math(#[from] math::MathError),
    #[error(transparent)]
    Visual(#[from] visual::VisualError),
    #[error(transparent)]
    Memory(#[from] memory::MemoryError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error(transparent)]
    Cache(#[from] cache::CacheError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    TensorFile(#[from] tensor_io::TensorFileError),
    #[error(transparent)]
    UnknownStrategy(#[from] registry::UnknownStrategy),
}

pub type Result<T> = std::result::Result<T, Error>;
