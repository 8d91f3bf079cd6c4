//! Trace-driven simulator of multi-user, multi-connectivity edge task
//! offloading for elastic VR workloads, with the learning stack that drives
//! it: centralized/independent phasic policy gradient agents and a family of
//! contextual bandits, plus baselines, oracles, and experiment protocols.

pub mod bandit;
pub mod config;
pub mod env;
pub mod eval;
pub mod nn;
pub mod ppg;
pub mod traces;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent deterministic RNG stream: same `(seed, stream)` always yields
/// the same sequence, and distinct streams never collide. Every stochastic
/// component draws from its own stream so parallel rollouts stay reproducible.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
