//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegalift::{PairSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A uniform `C×side×side` image in `[0, 1)`.
pub fn image(rng: &mut ChaCha8Rng, channels: usize, side: usize) -> Tensor {
    Tensor::from_fn(&[channels, side, side], |_| rng.random_range(0.0..1.0))
}

/// `n` random RGB pairs with alternating labels.
pub fn pairs(n: usize, side: usize, seed: u64) -> PairSet {
    let mut r = rng(seed);
    let mut set = PairSet { secrets: vec![], covers: vec![], labels: vec![] };
    for k in 0..n {
        set.secrets.push(image(&mut r, 3, side));
        set.covers.push(image(&mut r, 3, side));
        set.labels.push((k % 2) as u8);
    }
    set
}
