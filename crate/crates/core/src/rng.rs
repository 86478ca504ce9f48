//! Deterministic random streams.
//!
//! Every consumer derives its own ChaCha stream from the run seed plus a tag
//! and an index, so results never depend on the order in which independent
//! pieces of work draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, tag, index)`; distinct arguments give unrelated streams.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    h = mix(h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    ChaCha8Rng::seed_from_u64(h)
}
