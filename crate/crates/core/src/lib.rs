//! Demonstration-driven safety shield for reinforcement learning.
//!
//! At every step the agent's running trajectory is compared, with dynamic
//! time warping, against a small set of safe and a small set of unsafe
//! demonstrations. When it resembles the unsafe group at least as much as the
//! safe group the episode is cut short: the action is never executed, the
//! transition receives the task's lowest reward, and a learned dynamics model
//! supplies the successor state.
//!
//! Module map:
//! - [`types`]: trajectories, episode records, JSONL corpora, replay memory
//! - [`dtw`]: alignment cost kernel
//! - [`filters`]: the 24 group-comparison methods, 576 strategies, verdicts
//! - [`neural`]: small MLP with backprop and Adam
//! - [`dynamics`]: one-step state predictor
//! - [`envs`]: deterministic toy environments with unsafe terminal states
//! - [`agent`]: random, scripted and actor-critic policies
//! - [`shield`]: the per-step intervention and episode loop
//! - [`ablation`]: offline replay scoring and strategy ranking
//! - [`experiment`]: demo generation, training runs and reports used by the CLI

pub mod ablation;
pub mod agent;
pub mod cli;
pub mod dtw;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod neural;
pub mod shield;
pub mod types;

pub use error::{Error, Result};

use rand::SeedableRng;

/// RNG used everywhere randomness is needed; seeded runs are reproducible across platforms.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
