//! Deterministic fan-out of one user seed into independent per-purpose seeds.
//!
//! `derive(seed, label)` hashes the label with FNV-1a, xors it into the base
//! seed and finishes with the splitmix64 mixer. The CLI fans `--seed` out to
//! `"probe"`, `"profile"`, `"net-train"`, `"sim"` and `"run"`. Below those,
//! probing derives `"alloc/<n>"` then the type id, profiling derives
//! `"profile/<type>"`, and the closed loop derives `"run/<n>"` per launch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
