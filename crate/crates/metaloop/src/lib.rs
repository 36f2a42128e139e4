//! Desk-scale gradient-based meta-learning: a unified inner/outer-loop engine
//! in which full-network adaptation, head-only adaptation and body-only
//! adaptation are the same algorithm with different per-group inner learning
//! rates, plus the representation-analysis tooling needed to see *why* the
//! three regimes behave differently.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff on a replayable computation record,
//!   with gradients that are themselves differentiable (second-order updates
//!   work by recording the backward pass as ordinary primitives).
//! - [`nn`]: small conv backbones (plain stack and residual), parameter
//!   grouping into named body groups plus a head group, head surgery.
//! - [`meta`]: episodic inner adaptation, outer meta-updates, evaluation.
//! - [`tasks`]: deterministic synthetic few-shot image domains and the
//!   on-disk dataset format.
//! - [`analysis`]: cosine/CKA representation probes, head-free nearest-mean
//!   evaluation, gradient-norm reports.
//! - [`cli`]: experiment configs, run artifacts, and the command entry
//!   points used by the `metaloop` binary.

pub mod analysis;
pub mod cli;
pub mod meta;
pub mod nn;
pub mod tasks;
pub mod tensor;

/// The one blessed way to make an RNG from an explicit seed. Everything
/// stochastic in this crate — init, episode sampling, domain generation —
/// goes through this, so runs are reproducible from their config alone.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent seed for a named sub-stream (validation episodes,
/// domain shift targets, ...). SplitMix64 over the seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
