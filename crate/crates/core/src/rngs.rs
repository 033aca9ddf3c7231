//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Independent generator for `name`; the same `(seed, name)` always yields
/// the same sequence.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Child seed for a sub-task, e.g. one training run among many.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    use rand::Rng as _;
    let mut rng = stream(seed, name);
    rng.set_word_pos(index as u128 * 16);
    rng.random()
}
