//! Seed derivation. Every random stream in a run is derived from one
//! top-level seed as `mix(mix(top ^ fnv1a(label)) + index)`, where `mix` is
//! the SplitMix64 finaliser and `label` names the consumer (for example
//! `"synthgen.site"` or `"sweep.shuffle"`).

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for stream `label`, item `index`, under top-level `seed`.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    mix(mix(seed ^ fnv1a(label)).wrapping_add(index))
}
