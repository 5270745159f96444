//! A small decoder-only transformer whose KV cache is pruned at prefill by
//! learned attention gates, together with baseline eviction policies,
//! training, FLOPs/memory accounting and visualization export.
//!
//! Everything runs in `f64` on the CPU. The [`tensor`] module provides the
//! reverse-mode engine the model and gates are trained with.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod export;
pub mod gate;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod policy;
pub mod tensor;
pub mod train;

pub use cache::{prune_cache, KVCache};
pub use config::{GateVariant, ModelConfig};
pub use error::{Error, Result};
pub use gate::{EvictionFlags, GateStats, LayerFlags};
pub use model::{GateMode, Model, TokenId};
pub use parallel::Parallelism;
pub use policy::PolicySpec;
pub use train::{LossConfig, TrainSpec, TrainableSet};
