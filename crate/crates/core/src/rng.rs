//! Named, seed-derived random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` keyed by a root
//! seed and a stream name (`"fit"`, `"sample"`, `"trial/17"`, ...), so that
//! components can be re-run in isolation and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the sub-stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(name)))
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

/// Seed for trial `index` of an experiment; independent of scheduling order.
pub fn trial_seed(root: u64, index: usize) -> u64 {
    derive_seed(root, &format!("trial/{index}"))
}
