//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator keyed by a base seed plus a stream label, so results never
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn rng_for(base: u64, stream: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream))
}
