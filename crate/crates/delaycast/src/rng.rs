//! Reproducible random-number streams keyed by experiment coordinates.
//!
//! Every stochastic step in an experiment (a replicate, an origin, a method,
//! an imputation) draws from a stream derived from the master seed plus a list
//! of integer tags. Streams are independent of scheduling, so parallel runs
//! with any worker count produce bitwise-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; the usual seed-expansion finalizer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a list of tags into a single stream key.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed ^ 0x6a09_e667_f3bc_c909;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// A counter-derived RNG stream for the given coordinates.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, tags))
}
