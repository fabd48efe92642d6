//! Multi-agent tree search over a synthetic bit-string task family, with
//! per-agent policy optimization, reward-model reranking, and diversity
//! metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod agents;
pub mod bandit;
pub mod config;
pub mod dispatch;
pub mod diversity;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod reward_model;
pub mod rl;
pub mod search;
pub mod tree;
pub mod types;

pub use error::{Error, Result};
pub use types::{AgentId, Bits, LogProbTrace, NodeId, NodeRecord, PromptContext, Solution};

/// Random stream used everywhere a seed must reproduce a run.
pub type SearchRng = rand_chacha::ChaCha8Rng;

/// Seed for stream `stream` derived from `master` (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `f` on a pool of `workers` threads, or on the global pool when
/// `workers` is `None`.
pub fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(f),
        None => f(),
    }
}
