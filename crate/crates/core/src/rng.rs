//! Seeded random streams. Every chain and every verification job owns one
//! ChaCha stream selected by `(seed, stream)`, so results never depend on
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type ChainRng = ChaCha20Rng;

/// Default seed used when none is supplied.
pub const DEFAULT_SEED: u64 = 20_240_917;

pub fn stream_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
