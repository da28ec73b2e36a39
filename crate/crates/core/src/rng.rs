use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every random draw in the crate goes through this generator so runs are
/// reproducible from a `u64` seed on any platform.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, stream)`.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
