//! Seeded random streams. Every replicate, resample and record gets its own
//! xoshiro256++ stream keyed by `(seed, index)`, so results do not depend on
//! how work is scheduled. Imputation draws are keyed by covariate value.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    Xoshiro256PlusPlus::seed_from_u64(splitmix64(seed) ^ splitmix64(splitmix64(index) ^ 0xD1B5_4A32_D192_ED03))
}

/// Stream for imputation draws at covariate value `x`. Keying on the value
/// rather than the row makes `δ̂(z, x)` a function of `x`, so equal records
/// share draws and results do not depend on record order.
pub fn covariate_stream(seed: u64, x: &[f64]) -> StreamRng {
    let key = x.iter().fold(0x243F_6A88_85A3_08D3u64, |h, v| splitmix64(h ^ v.to_bits()));
    stream(seed, key)
}

/// Generator seeded directly from `seed`.
pub fn seeded(seed: u64) -> StreamRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// A fresh seed for a nested computation, drawn from `rng`.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}
