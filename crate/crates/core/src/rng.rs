//! Derived random streams, so per-item randomness does not depend on
//! processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for item `b` of group `a` under a purpose `tag`.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(tag ^ splitmix64(a)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(b);
    rng
}

pub(crate) const TAG_AUGMENT: u64 = 0x6175_6731;
pub(crate) const TAG_SHUFFLE: u64 = 0x7368_7566;
pub(crate) const TAG_CORRUPT: u64 = 0x636f_7272;
pub(crate) const TAG_INIT: u64 = 0x696e_6974;
pub(crate) const TAG_STATS: u64 = 0x7374_6174;
pub(crate) const TAG_SYNTH: u64 = 0x7379_6e74;
