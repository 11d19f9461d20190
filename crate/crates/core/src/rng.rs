//! Seeding discipline.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] whose seed is derived
//! from a parent seed and a label with [`split`]. A run owns one global seed;
//! stages derive `split(global, "ssl")`, steps derive `split(stage, step)`,
//! samples derive `split(step, index)`. Because every stream depends only on
//! its derivation path, the order in which work is scheduled cannot change
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Something a child seed can be derived with.
pub trait SeedLabel {
    fn label_bits(&self) -> u64;
}

impl SeedLabel for u64 {
    fn label_bits(&self) -> u64 {
        *self
    }
}

impl SeedLabel for usize {
    fn label_bits(&self) -> u64 {
        *self as u64
    }
}

impl SeedLabel for &str {
    fn label_bits(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// Derive a child seed: `mix(mix(parent) ^ label)`.
pub fn split(parent: u64, label: impl SeedLabel) -> u64 {
    mix(mix(parent) ^ label.label_bits())
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
