use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes a derived generator can serve; keeps streams independent.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Embeddings = 4,
    Synthetic = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator fully determined by `(seed, stream, index)`.
pub(crate) fn derived(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}
