#![allow(dead_code)]

use dynalign::metafilter::{self, FilterShape};
use dynalign::sampler::{self, ETA_BIAS, ETA_WEIGHT};
use dynalign::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// ψ and η for `c` channels, with η randomised so the offsets are not zero.
pub fn align_params(c: usize, shape: FilterShape, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    metafilter::init_psi(&mut p, c, shape, rng).unwrap();
    sampler::init_eta(&mut p, c).unwrap();
    let w = p.get(ETA_WEIGHT).unwrap().shape().to_vec();
    p.set(ETA_WEIGHT, uniform(rng, &w, -0.1, 0.1)).unwrap();
    p.set(ETA_BIAS, uniform(rng, &[18], -0.7, 0.7)).unwrap();
    p
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    dynalign::reference::relative_error(a, b)
}
