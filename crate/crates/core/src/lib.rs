//! Importance-aware mixed-precision KV cache compression.
//!
//! Tokens the attention history marks as important stay at high precision;
//! the rest are quantized to a few bits instead of being evicted. A per-channel
//! balancer moves outlier magnitude from keys into queries before
//! quantization so low-bit keys stay accurate.
//!
//! Modules: [`quant`] (group quantizer and bit packing), [`balance`]
//! (channel balancer and outlier analysis), [`policy`] (importance scoring and
//! demotion), [`cache`] (the two-tier cache and memory accounting),
//! [`attention`] (reference attention and trace replay), [`trace`] (the
//! `.mikv` trace format and synthetic generators) and [`cli`].

pub mod attention;
pub mod balance;
pub mod cache;
pub mod cli;
pub mod error;
pub mod policy;
pub mod quant;
pub mod trace;

pub use attention::{replay, ReplayOptions, RunReport};
pub use balance::ChannelBalancer;
pub use cache::{
    memory_report, HeadCache, MemoryParams, MemoryReport, MixedKVCache, ModelDims, Tier,
    TierPrecision,
};
pub use error::{Error, Result};
pub use policy::{PolicyConfig, PolicyKind, Precision};
pub use quant::{dequantize, quantize, QuantSpec, QuantizedBlock};
pub use trace::{AnswerKey, Trace, TraceHeader};
