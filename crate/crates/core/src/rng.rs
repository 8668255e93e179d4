//! Seed derivation for independent deterministic streams.
//!
//! Every randomized stage (corpus sample, dropout mask, batch shuffle)
//! derives its own stream seed from the run seed plus structural indices,
//! so streams never alias and results are independent of evaluation order.

/// SplitMix64 finalizer; a full-avalanche mix of one word.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds `parts` into one well-mixed stream seed.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x853c49e6748fea9b_u64;
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}
