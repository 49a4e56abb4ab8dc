//! Stateful multi-agent tool-calling inference over a deterministic mock
//! model.
//!
//! The serving pipeline keeps KV state alive across requests so that each
//! turn of a growing conversation only pays for its new tokens:
//!
//! * [`kv`]: unified cell store with span-list page tables and
//!   constant-time metadata-only aliasing.
//! * [`radix`]: token trie of saved prefixes with delta-only commits and
//!   leaf-oldest eviction.
//! * [`pool`]: fixed pool of sequence ids with guard-based release.
//! * [`scheduler`]: continuous batching with cell-budget admission, adaptive
//!   chunked prefill and leader/follower grouped prefill.
//! * [`speculator`]: prompt-lookup speculative decoding with acceptance
//!   gating.
//! * [`validator`]: streaming brace tracker with early stop and a declared
//!   tool filter.
//! * [`cache`]: response, render and tokenize LRU caches.
//! * [`cost`]: analytic per-turn latency model and speedup arithmetic.
//! * [`engine`]: the request pipeline tying these together, and [`server`]
//!   its OpenAI-compatible HTTP facade.
//!
//! See the crate's `examples/` directory for one runnable program per
//! capability.

pub mod api;
pub mod cache;
pub mod config;
pub mod cost;
pub mod engine;
pub mod fnv;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod radix;
pub mod scheduler;
pub mod server;
pub mod speculator;
pub mod validator;
pub mod workload;

use serde::{Deserialize, Serialize};

/// A vocabulary id.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Token(pub u32);

/// A named sequence in the unified KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqId(pub u32);

impl std::fmt::Display for SeqId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seq{}", self.0)
    }
}

pub use config::ServerConfig;
pub use engine::{ChatOutcome, Engine, EngineConfig, Features, ServeError};
