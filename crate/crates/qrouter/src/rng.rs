//! Deterministic RNG streams: every experiment derives its own seed from a
//! master seed plus a stream index, so sweeps can run in parallel and still
//! reproduce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for stream `index` of master seed `master`.
pub fn stream_rng(master: u64, index: u64) -> ChaCha12Rng {
    let mut state = master ^ index.wrapping_mul(0xa0761d6478bd642f);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(42, 0).random();
        let b: u64 = stream_rng(42, 0).random();
        let c: u64 = stream_rng(42, 1).random();
        let d: u64 = stream_rng(43, 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
