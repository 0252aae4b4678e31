//! Seed splitting.
//!
//! Child seeds are `splitmix64(master ^ splitmix64(index + 1))`, so the seed of
//! trial `i` depends only on the master seed and `i`: adding trials never
//! changes the seeds of earlier ones.

/// One round of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `master`.
pub fn derive(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

/// Child seed for a named stream (data, init, attack, ...) under `master`.
pub fn stream(master: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps stream ids stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(master, h)
}
