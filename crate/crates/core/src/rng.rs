//! Seed splitting.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a root seed
//! and a stream tag, so adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Changing a value changes every result drawn from that stream.
pub mod stream {
    pub const PARAM_INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const CODEBOOK_INIT: u64 = 0x03;
    pub const SYNTH_CENTERS: u64 = 0x10;
    pub const SYNTH_SAMPLES: u64 = 0x11;
    pub const AUGMENT: u64 = 0x20;
    pub const RANDOM_CODES: u64 = 0x30;
    pub const HISTOGRAM: u64 = 0x31;
    pub const AP_JITTER: u64 = 0x40;
    pub const GRADCHECK: u64 = 0x50;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed`, a stream tag and an index within the stream.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        assert_ne!(derive(7, stream::SHUFFLE, 0), derive(7, stream::PARAM_INIT, 0));
        assert_ne!(derive(7, stream::SHUFFLE, 0), derive(7, stream::SHUFFLE, 1));
        assert_eq!(derive(7, stream::SHUFFLE, 3), derive(7, stream::SHUFFLE, 3));
    }
}
