//! Deterministic random streams.
//!
//! Every random process draws from a ChaCha8 stream whose seed is derived from
//! the global seed and a path of stream tags (phase, epoch, batch, class ...).
//! Streams with different paths are independent, so work can be split across
//! workers without changing results.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TAG_INIT: u64 = 0x696e_6974;
pub const TAG_DATA: u64 = 0x6461_7461;
pub const TAG_TRAIN: u64 = 0x7472_6169;
pub const TAG_ESTIMATE: u64 = 0x6573_7469;
pub const TAG_RECOVER: u64 = 0x7265_636f;
pub const TAG_RELABEL: u64 = 0x7265_6c61;
pub const TAG_AUGMENT: u64 = 0x6175_676d;
pub const TAG_PRUNE: u64 = 0x7072_756e;
pub const TAG_STREAM: u64 = 0x7374_7265;
pub const TAG_VALIDATE: u64 = 0x7661_6c69;
pub const TAG_MONTE_CARLO: u64 = 0x6d6f_6e74;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of tags into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}

pub fn permutation(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Splits a fresh permutation of `0..n` into full batches; the trailing
/// incomplete batch is dropped when `drop_last` is set.
pub fn epoch_batches(n: usize, batch_size: usize, drop_last: bool, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let perm = permutation(n, rng);
    perm.chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_give_distinct_streams() {
        let a: u64 = stream(7, &[TAG_AUGMENT, 0, 1]).random();
        let b: u64 = stream(7, &[TAG_AUGMENT, 1, 0]).random();
        let c: u64 = stream(7, &[TAG_AUGMENT, 0, 1]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn epoch_batches_drop_last() {
        let mut rng = stream(1, &[]);
        let b = epoch_batches(10, 4, true, &mut rng);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|c| c.len() == 4));
        let mut rng = stream(1, &[]);
        assert_eq!(epoch_batches(10, 4, false, &mut rng).len(), 3);
    }
}
