//! Counter-based seeding.
//!
//! Every random stream is addressed by `(master seed, domain, index)`, so
//! streams are independent of generation order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never share key material.
pub mod domain {
    pub const PULSES: u64 = 0x5055_4c53;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const RESTART: u64 = 0x5253_5452;
    pub const SAMPLE: u64 = 0x534d_504c;
    pub const SPLIT: u64 = 0x5350_4c54;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed; used to chain domains (e.g. sample index -> noise).
pub fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index.wrapping_mul(0xd134_2543_de82_ef95))
}

/// Independent ChaCha8 stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}
