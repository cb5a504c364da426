//! Role-based sub-seed derivation so every random stream flows from one run seed.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named role (e.g. `"init"`, `"noise"`).
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    // FNV-1a over the role name
    let h = role
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix64(seed ^ splitmix64(h))
}
