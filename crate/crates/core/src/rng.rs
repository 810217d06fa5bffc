use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams so one master seed drives every random decision
/// without collisions between, say, scene placement and weight init.
pub const STREAM_SCENE: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_MASK: u64 = 4;
pub const STREAM_SAMPLE: u64 = 5;

/// SplitMix64 step; the standard 64-bit finalizer. Used only to derive
/// seeds, never as the sampling generator itself.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically derive an independent seed for (master, stream, index).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(stream));
    splitmix64(a ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// The project-wide generator: ChaCha8 is reproducible across platforms
/// and fast enough for everything we sample.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
