//! Child-seed derivation. Every random stream in a run is derived from one
//! base seed: `child = splitmix64(base + stream · 0x9E3779B97F4A7C15)`.

/// Stream ids for [`derive_seed`].
pub mod stream {
    pub const IMAGE_ENCODER: u64 = 1;
    pub const LIDAR_ENCODER: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const SYNTHETIC_DATA: u64 = 4;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
