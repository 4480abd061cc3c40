//! Deterministic seed derivation.
//!
//! Every random stream in the simulator is keyed by a 64-bit seed derived
//! from (base seed, purpose tag, indices...) through a splitmix64 chain.
//! Streams are independent of each other, so e.g. adding users to a round
//! or skipping the noise draw of a plain run never perturbs the batch
//! shuffles or the user-sampling sequence of other components.
//!
//! Stream layout:
//! - run seed       = derive(base_seed, [RUN, run_index])
//! - model init     = derive(run_seed, [INIT])
//! - user sampling  = derive(run_seed, [SAMPLING, round])
//! - server noise   = derive(run_seed, [NOISE, round])
//! - local training = derive(run_seed, [LOCAL, round, user_index])

/// Purpose tags. Arbitrary odd constants, fixed forever for reproducibility.
pub const RUN: u64 = 0x9e37_79b9_7f4a_7c15;
pub const INIT: u64 = 0x5851_f42d_4c95_7f2d;
pub const SAMPLING: u64 = 0x2545_f491_4f6c_dd1d;
pub const NOISE: u64 = 0x27bb_2ee6_87b0_b0fd;
pub const LOCAL: u64 = 0xda94_2042_e4dd_58b5;
pub const DATA: u64 = 0x9fb2_1c65_1e98_df25;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a list of stream coordinates.
pub fn derive(parent: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(parent);
    for &p in parts {
        state = splitmix64(state ^ p);
    }
    state
}

/// Stable per-run seed: child seed = hash of (base seed, run index).
pub fn run_seed(base_seed: u64, run_index: u64) -> u64 {
    derive(base_seed, &[RUN, run_index])
}
