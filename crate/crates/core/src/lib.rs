//! Inference engine for a tiny decoder-only transformer whose KV cache is
//! organised by a segment graph.
//!
//! Segments are prefilled independently into a shared position range; each
//! target segment is then re-encoded in the next range while attending to the
//! cached blocks of its source segments; the query and generated tokens read
//! one block per segment. Sequential and parallel encoders are provided as
//! baselines, and [`oracle`] holds independent references for testing.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod tokenizer;
pub mod topology;

pub use decoder::{generate, visible_set, GenerateOptions, GenerationResult, RunMetrics};
pub use encoders::{
    encode, encode_graphkv, encode_parallel, encode_sequential, CacheState, EncodeOptions,
    EncodeStats, Topology, TopologyKind,
};
pub use error::{Error, Result};
pub use kvcache::{KvBlock, KvStore, PePlan, PlanOptions};
pub use model::{AttentionKnobs, EncodeMode, Model, ModelConfig};
pub use topology::{Segment, SegmentGraph};
