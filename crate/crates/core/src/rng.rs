//! Counter-based randomness: every draw is a pure function of its key, so
//! results do not depend on evaluation order or worker count.

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes an ordered key tuple into 64 bits.
#[inline]
pub fn hash_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Uniform draw in `[0, 1)` keyed by `(seed, step, voxel)`.
#[inline]
pub fn firing_uniform(seed: u64, step: u64, voxel: u64) -> f32 {
    let h = hash_key(&[seed, step, voxel]);
    (h >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
}

/// Derives an independent child seed.
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    hash_key(&[seed, tag, 0x5eed])
}
