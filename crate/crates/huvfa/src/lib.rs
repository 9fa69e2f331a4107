//! Hierarchical universal value function approximators in the Four Rooms domain.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`env`] — the deterministic 13x13 Four Rooms gridworld with
//!   goal-parameterized episodes and a BFS shortest-path oracle.
//! - [`tabular`] — the two-level tabular learner: option values
//!   `Q_omega(s, o)`, intra-option values `Q_u(s, o, a)`, and the
//!   bootstrap updates in full-beta and beta-equals-one form.
//! - [`horde`] — per-goal learner collections sharing a transition
//!   history, off-goal replay, and construction of the dense value
//!   tensors and history-indexed data matrices.
//! - [`tensor`] — dense n-dimensional tensors and CP decomposition by
//!   alternating least squares.
//! - [`net`] — small feedforward stream networks regressing raw
//!   features onto factor rows.
//! - [`model`] — assembled multi-stream value models, the two-stream
//!   baseline, greedy rollouts, and steps-to-goal evaluation.
//! - [`pipeline`] — the reproduction harness: configuration, build
//!   orchestration, persistence, CSV metrics, and SVG plots.
//!
//! See the `examples/` directory for one runnable example per
//! capability; the `huvfa` binary exposes the same pipeline as
//! subcommands.

pub mod env;
pub mod horde;
pub mod model;
pub mod net;
pub mod persist;
pub mod pipeline;
pub mod svg;
pub mod tabular;
pub mod tensor;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a named per-stage seed from a master seed.
///
/// Every random decision in the crate flows from one experiment seed
/// through these named sub-seeds; no global RNG is used anywhere.
pub fn sub_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, folded into the master via SplitMix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded RNG for one named pipeline stage.
pub fn stage_rng(master: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, stage))
}
