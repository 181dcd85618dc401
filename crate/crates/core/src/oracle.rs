//! Equivalence of the optimised kernels with the loop references on random
//! instances of varying shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::heads;
use crate::metafilter::{self, FilterShape, MetaFilter, PSI_BIAS, PSI_WEIGHT};
use crate::ops;
use crate::params::ParamStore;
use crate::reference::{self, relative_error};
use crate::sampler::{self, Neighborhood, OffsetField};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

fn compare(actual: &Tensor, expected: &Tensor) -> f64 {
    assert_eq!(actual.shape(), expected.shape());
    relative_error(actual.data(), expected.data())
}

fn conv2d_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = rng.random_range(1..=2);
    let c_in = groups * rng.random_range(1..=3);
    let c_out = groups * rng.random_range(1..=3);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2);
    let (h, w) = (rng.random_range(k..k + 5), rng.random_range(k..k + 5));
    let n = rng.random_range(1..=2);
    let x = rand_tensor(rng, &[n, c_in, h, w], -1.0, 1.0);
    let wt = rand_tensor(rng, &[c_out, c_in / groups, k, k], -1.0, 1.0);
    let b = rng.random_bool(0.5).then(|| rand_tensor(rng, &[c_out], -1.0, 1.0));
    let tape = Tape::inert();
    let bias = b.clone().map(|b| tape.constant(b));
    let got = ops::conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), bias, stride, padding, groups)?;
    let want = reference::conv2d(&x, &wt, b.as_ref(), stride, padding, groups)?;
    Ok(compare(&got.value(), &want))
}

fn unfold_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let tape = Tape::inert();
    let got = ops::unfold(tape.constant(x.clone()), k)?;
    Ok(compare(&got.value(), &reference::unfold(&x, k)?))
}

fn gather_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c, h, w) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(2..=6));
    let x = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let off = rand_tensor(rng, &[n, 18, h, w], -2.0, 2.0);
    let tape = Tape::inert();
    let field = OffsetField::new(tape.constant(off.clone()))?;
    let got = sampler::bilinear_gather(tape.constant(x.clone()), field)?;
    Ok(compare(&got.patches.value(), &reference::bilinear_gather(&x, &off)?))
}

fn filter_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = [1, 2, 4][rng.random_range(0..3)];
    let c = groups * rng.random_range(1..=2);
    let k = [1, 3][rng.random_range(0..2)];
    let shape = FilterShape::new(groups, k);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let patches = rand_tensor(rng, &[1, c * 9, h, w], -1.0, 1.0);
    let mut params = ParamStore::new();
    metafilter::init_psi(&mut params, c, shape, rng)?;
    let tape = Tape::inert();
    let got = metafilter::generate_filter(
        Neighborhood {
            patches: tape.constant(patches.clone()),
        },
        shape,
        &params,
    )?;
    let want = reference::generate_filter(
        &patches,
        params.get(PSI_WEIGHT).expect("psi"),
        params.get(PSI_BIAS).expect("psi"),
    )?;
    Ok(compare(&got.weights.value(), &want))
}

fn deformable_filter_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = [1, 2][rng.random_range(0..2)];
    let c = groups * rng.random_range(1..=2);
    let k = [1, 3][rng.random_range(0..2)];
    let shape = FilterShape::new(groups, k);
    let (s, h, w) = (rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5));
    let rows: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..s)).collect();
    let support = rand_tensor(rng, &[s, c, h, w], -1.0, 1.0);
    let off = rand_tensor(rng, &[rows.len(), 18, h, w], -2.0, 2.0);
    let mut params = ParamStore::new();
    metafilter::init_psi(&mut params, c, shape, rng)?;
    let tape = Tape::inert();
    let field = OffsetField::new(tape.constant(off.clone()))?;
    let got = metafilter::generate_filter_deformable(tape.constant(support.clone()), &rows, field, shape, &params)?;
    let mut picked = Vec::with_capacity(rows.len() * c * h * w);
    for &r in &rows {
        picked.extend_from_slice(&support.data()[r * c * h * w..][..c * h * w]);
    }
    let picked = Tensor::from_vec(&[rows.len(), c, h, w], picked)?;
    let want = reference::generate_filter(
        &reference::bilinear_gather(&picked, &off)?,
        params.get(PSI_WEIGHT).expect("psi"),
        params.get(PSI_BIAS).expect("psi"),
    )?;
    Ok(compare(&got.weights.value(), &want))
}

fn gdc_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = [1, 2, 4][rng.random_range(0..3)];
    let c = groups * rng.random_range(1..=2);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let n = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let q = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let f = rand_tensor(rng, &[n, groups * k * k, h, w], 0.0, 1.0);
    let tape = Tape::inert();
    let got = metafilter::grouped_dynamic_conv(
        tape.constant(q.clone()),
        MetaFilter {
            weights: tape.constant(f.clone()),
            shape: FilterShape::new(groups, k),
        },
    )?;
    Ok(compare(&got.value(), &reference::grouped_dynamic_conv(&q, &f, groups, k)?))
}

fn classify_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(1..=5), rng.random_range(1..=5)];
    let p = rand_tensor(rng, &shape, -1.0, 1.0);
    let q = rand_tensor(rng, &shape, -1.0, 1.0);
    let tape = Tape::inert();
    let got = heads::meta_classify(tape.constant(p.clone()), tape.constant(q.clone()))?;
    Ok(compare(&got.value(), &reference::meta_classify(&p, &q)?))
}

fn spatial_mean_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let tape = Tape::inert();
    let got = ops::spatial_mean(tape.constant(x.clone()))?;
    Ok(compare(&got.value(), &reference::spatial_mean(&x)?))
}

fn prototype_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(1..=5);
    let x = rand_tensor(rng, &[k + 2, 3, 4, 4], -1.0, 1.0);
    let rows: Vec<usize> = (1..=k).collect();
    let tape = Tape::inert();
    let got = ops::segment_mean(tape.constant(x.clone()), std::slice::from_ref(&rows))?;
    Ok(compare(&got.value(), &reference::prototype(&x, &rows)?))
}

type Instance = fn(&mut ChaCha8Rng) -> Result<f64>;

const SUITE: [(&str, Instance); 9] = [
    ("conv2d", conv2d_instance),
    ("unfold", unfold_instance),
    ("bilinear_gather", gather_instance),
    ("generate_filter", filter_instance),
    ("deformable_filter", deformable_filter_instance),
    ("grouped_dynamic_conv", gdc_instance),
    ("meta_classify", classify_instance),
    ("spatial_mean", spatial_mean_instance),
    ("prototypes", prototype_instance),
];

/// Runs `instances` random instances of every kernel.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OracleResult>> {
    SUITE
        .iter()
        .enumerate()
        .map(|(i, &(op, instance))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(instance(&mut rng)?);
            }
            Ok(OracleResult {
                op,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}
