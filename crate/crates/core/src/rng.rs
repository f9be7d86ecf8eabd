use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

/// Independent, reproducible generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Child seed for `(seed, tags...)`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ 0x6d73_6761_6e00_0000);
    for &t in tags {
        h = splitmix(h ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn gaussian<T: Real, R: rand::Rng>(rng: &mut R, n: usize) -> Array1<T> {
    Array1::from_shape_fn(n, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}
