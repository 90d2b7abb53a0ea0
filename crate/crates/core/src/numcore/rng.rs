use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator used for every stochastic operation.
pub type Rng = ChaCha8Rng;

/// Generator for stream `stream` under `seed`. ChaCha is counter based, so
/// distinct streams are independent and cheap to create in any order.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mix two integers into a seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, id: u64) -> u64 {
    let mut z = base
        ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
