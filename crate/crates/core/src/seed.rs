//! Seed derivation.
//!
//! Every run has one master seed. Subsystems get their own seed through
//! `derive(master, stream)`, which mixes the stream tag into the master with
//! two rounds of the splitmix64 finalizer. Streams are fixed constants below,
//! so adding a subsystem never shifts the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SCENES_TRAIN: u64 = 0x01;
pub const STREAM_SCENES_EVAL: u64 = 0x02;
pub const STREAM_PARAMS: u64 = 0x03;
pub const STREAM_TRAIN_STEPS: u64 = 0x04;
pub const STREAM_RENDER: u64 = 0x05;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream.wrapping_mul(GOLDEN))
}

/// Seed for item `index` of a derived stream (scene `i`, iteration `t`, ...).
pub fn derive_indexed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(derive(master, stream) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_do_not_collide() {
        let seeds: std::collections::BTreeSet<u64> = (1..=5).map(|s| derive(42, s)).collect();
        assert_eq!(seeds.len(), 5);
        assert_ne!(derive_indexed(42, 1, 0), derive_indexed(42, 1, 1));
        assert_eq!(derive(7, 3), derive(7, 3));
    }
}
