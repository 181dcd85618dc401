//! Central finite differences and the gradient-check suite.
//!
//! Every case reduces an operation's output to a scalar with a fixed random
//! projection, then compares the reverse-mode gradient of each input and each
//! parameter with a central-difference estimate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{self, BackboneConfig};
use crate::error::{invalid, Error, Result};
use crate::heads;
use crate::metafilter::{self, FilterShape, MetaFilter};
use crate::model::{self, EpisodeInput, ModelConfig};
use crate::ode::{FilterRefresh, OdeConfig};
use crate::ops;
use crate::params::ParamStore;
use crate::sampler::{self, Neighborhood, OffsetField};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Looser bound for gradients through the adaptive solver.
pub const SOLVER_TOLERANCE: f64 = 1e-3;

/// `(f(p + step) - f(p - step)) / (2 step)` for every scalar of every
/// parameter.
pub fn finite_diff_grad(
    f: impl Fn(&ParamStore) -> Result<f64>,
    params: &ParamStore,
    step: f64,
) -> Result<BTreeMap<String, Tensor>> {
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    for (name, value) in params.iter() {
        let base = value.to_vec();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + step;
            work.set(name, Tensor::from_vec(value.shape(), probe.clone())?)?;
            let plus = checked(f(&work)?, name, i)?;
            probe[i] = base[i] - step;
            work.set(name, Tensor::from_vec(value.shape(), probe)?)?;
            let minus = checked(f(&work)?, name, i)?;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        work.set(name, value.clone())?;
        out.insert(name.to_owned(), Tensor::from_vec(value.shape(), grad)?);
    }
    Ok(out)
}

/// Central differences of a scalar function of one tensor.
pub fn finite_diff_input(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        let plus = checked(f(&Tensor::from_vec(x.shape(), probe.clone())?)?, "input", i)?;
        probe[i] = base[i] - step;
        let minus = checked(f(&Tensor::from_vec(x.shape(), probe)?)?, "input", i)?;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::from_vec(x.shape(), grad)
}

fn checked(v: f64, what: &str, i: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "function value {v} while perturbing {what}[{i}]"
        )))
    }
}

/// `max |a - n| / max(max |a|, max |n|, 1e-8)`.
pub fn grad_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub case: String,
    pub wrt: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

type Build = Box<dyn for<'t> Fn(&[Var<'t>], &ParamStore) -> Result<Var<'t>> + Send + Sync>;

/// One operation under test with its random inputs and parameters.
pub struct Case {
    pub name: &'static str,
    inputs: Vec<(&'static str, Tensor)>,
    params: ParamStore,
    build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

/// Random offsets kept away from integers, where bilinear sampling has kinks.
fn rand_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let whole: i32 = rng.random_range(-2..2);
        whole as f64 + rng.random_range(0.05..0.95)
    })
    .expect("valid shape")
}

fn case(
    name: &'static str,
    inputs: Vec<(&'static str, Tensor)>,
    params: ParamStore,
    build: impl for<'t> Fn(&[Var<'t>], &ParamStore) -> Result<Var<'t>> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        inputs,
        params,
        build: Box::new(build),
    }
}

/// Projection `sum(out * r)` with a fixed random `r`.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    ops::sum(ops::mul(out, out.tape().constant(r))?)
}

fn eval_case(case: &Case, inputs: &[Tensor], params: &ParamStore) -> Result<f64> {
    let tape = Tape::inert();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    project((case.build)(&vars, params)?, 1)?.item()
}

/// Compares analytic and numeric gradients of every input and parameter.
pub fn run_case(case: &Case) -> Result<Vec<GradCheck>> {
    let tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = project((case.build)(&vars, &case.params)?, 1)?;
    let grads = tape.backward(root)?;
    let values: Vec<Tensor> = case.inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut checks = Vec::new();
    for (idx, (label, _)) in case.inputs.iter().enumerate() {
        let numeric = finite_diff_input(
            |x| {
                let mut probe = values.clone();
                probe[idx] = x.clone();
                eval_case(case, &probe, &case.params)
            },
            &values[idx],
            DEFAULT_STEP,
        )?;
        checks.push(GradCheck {
            case: case.name.into(),
            wrt: (*label).into(),
            rel_error: grad_error(&grads.wrt(vars[idx]), &numeric),
            tolerance: TOLERANCE,
        });
    }
    if !case.params.is_empty() {
        let analytic = grads.for_params(&case.params);
        let numeric = finite_diff_grad(|p| eval_case(case, &values, p), &case.params, DEFAULT_STEP)?;
        for (name, n) in &numeric {
            checks.push(GradCheck {
                case: case.name.into(),
                wrt: name.clone(),
                rel_error: grad_error(&analytic[name], n),
                tolerance: TOLERANCE,
            });
        }
    }
    Ok(checks)
}

/// Every differentiable operation, on random inputs of at most `2x4x6x6`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let none = ParamStore::new;
    let mut cases = vec![
        case(
            "conv2d",
            vec![
                ("input", rand_tensor(r, &[2, 4, 5, 5], -1.0, 1.0)),
                ("weight", rand_tensor(r, &[6, 2, 3, 3], -1.0, 1.0)),
                ("bias", rand_tensor(r, &[6], -1.0, 1.0)),
            ],
            none(),
            |v, _| ops::conv2d(v[0], v[1], Some(v[2]), 1, 1, 2),
        ),
        case(
            "conv2d_strided",
            vec![
                ("input", rand_tensor(r, &[2, 3, 6, 6], -1.0, 1.0)),
                ("weight", rand_tensor(r, &[2, 3, 3, 3], -1.0, 1.0)),
            ],
            none(),
            |v, _| ops::conv2d(v[0], v[1], None, 2, 0, 1),
        ),
        case("unfold", vec![("input", rand_tensor(r, &[2, 2, 4, 4], -1.0, 1.0))], none(), |v, _| {
            ops::unfold(v[0], 3)
        }),
        case("sigmoid", vec![("x", rand_tensor(r, &[2, 3, 4, 4], -3.0, 3.0))], none(), |v, _| {
            ops::sigmoid(v[0])
        }),
        case("relu", vec![("x", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0))], none(), |v, _| ops::relu(v[0])),
        case("scale", vec![("x", rand_tensor(r, &[2, 3, 4], -1.0, 1.0))], none(), |v, _| {
            ops::scale(v[0], -1.7)
        }),
        case(
            "add",
            vec![("a", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0)), ("b", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0))],
            none(),
            |v, _| ops::add(v[0], v[1]),
        ),
        case(
            "sub",
            vec![("a", rand_tensor(r, &[3, 4], -1.0, 1.0)), ("b", rand_tensor(r, &[3, 4], -1.0, 1.0))],
            none(),
            |v, _| ops::sub(v[0], v[1]),
        ),
        case(
            "mul",
            vec![("a", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0)), ("b", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0))],
            none(),
            |v, _| ops::mul(v[0], v[1]),
        ),
        case(
            "lincomb",
            vec![
                ("a", rand_tensor(r, &[2, 5], -1.0, 1.0)),
                ("b", rand_tensor(r, &[2, 5], -1.0, 1.0)),
                ("c", rand_tensor(r, &[2, 5], -1.0, 1.0)),
            ],
            none(),
            |v, _| ops::lincomb(&[v[0], v[1], v[2]], &[0.5, -2.0, 3.0]),
        ),
        case("reshape", vec![("x", rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0))], none(), |v, _| {
            ops::reshape(v[0], &[6, 16])
        }),
        case(
            "concat_channels",
            vec![("a", rand_tensor(r, &[1, 2, 4, 4], -1.0, 1.0)), ("b", rand_tensor(r, &[1, 3, 4, 4], -1.0, 1.0))],
            none(),
            |v, _| ops::concat_channels(&[v[0], v[1]]),
        ),
        case("narrow_channels", vec![("x", rand_tensor(r, &[2, 4, 3, 3], -1.0, 1.0))], none(), |v, _| {
            ops::narrow_channels(v[0], 1, 2)
        }),
        case("index_select", vec![("x", rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0))], none(), |v, _| {
            ops::index_select(v[0], &[2, 0, 2, 1])
        }),
        case("segment_mean", vec![("x", rand_tensor(r, &[4, 2, 3, 3], -1.0, 1.0))], none(), |v, _| {
            ops::segment_mean(v[0], &[vec![0, 3], vec![1], vec![2, 1, 0]])
        }),
        case("global_avg_pool", vec![("x", rand_tensor(r, &[2, 4, 6, 6], -1.0, 1.0))], none(), |v, _| {
            ops::global_avg_pool(v[0])
        }),
        case("spatial_mean", vec![("x", rand_tensor(r, &[2, 4, 5, 5], -1.0, 1.0))], none(), |v, _| {
            ops::spatial_mean(v[0])
        }),
        case("max_pool2", vec![("x", rand_tensor(r, &[2, 4, 6, 6], -1.0, 1.0))], none(), |v, _| {
            ops::max_pool2(v[0])
        }),
        case("sum", vec![("x", rand_tensor(r, &[2, 3, 4], -1.0, 1.0))], none(), |v, _| ops::sum(v[0])),
        case("mean", vec![("x", rand_tensor(r, &[2, 3, 4], -1.0, 1.0))], none(), |v, _| ops::mean(v[0])),
        case(
            "dense",
            vec![
                ("input", rand_tensor(r, &[3, 5], -1.0, 1.0)),
                ("weight", rand_tensor(r, &[4, 5], -1.0, 1.0)),
                ("bias", rand_tensor(r, &[4], -1.0, 1.0)),
            ],
            none(),
            |v, _| ops::dense(v[0], v[1], v[2]),
        ),
        case("log_softmax", vec![("x", rand_tensor(r, &[3, 5], -2.0, 2.0))], none(), |v, _| {
            ops::log_softmax(v[0])
        }),
        case("log_softmax_maps", vec![("x", rand_tensor(r, &[2, 4, 3, 3], -2.0, 2.0))], none(), |v, _| {
            ops::log_softmax(v[0])
        }),
        case("nll", vec![("x", rand_tensor(r, &[2, 4, 3, 3], -2.0, 2.0))], none(), |v, _| {
            ops::nll(ops::log_softmax(v[0])?, &[3, 1])
        }),
        case(
            "bilinear_gather",
            vec![
                ("feature", rand_tensor(r, &[2, 3, 6, 6], -1.0, 1.0)),
                ("offsets", rand_offsets(r, &[2, 18, 6, 6])),
            ],
            none(),
            |v, _| Ok(sampler::bilinear_gather(v[0], OffsetField::new(v[1])?)?.patches),
        ),
        case(
            "grouped_dynamic_conv",
            vec![
                ("query", rand_tensor(r, &[1, 8, 5, 5], -1.0, 1.0)),
                ("filter", rand_tensor(r, &[1, 36, 5, 5], 0.0, 1.0)),
            ],
            none(),
            |v, _| {
                metafilter::grouped_dynamic_conv(
                    v[0],
                    MetaFilter {
                        weights: v[1],
                        shape: FilterShape::new(4, 3),
                    },
                )
            },
        ),
        case(
            "meta_classify",
            vec![
                ("prototype", rand_tensor(r, &[2, 4, 4, 4], -1.0, 1.0)),
                ("query", rand_tensor(r, &[2, 4, 4, 4], -1.0, 1.0)),
            ],
            none(),
            |v, _| heads::meta_classify(v[0], v[1]),
        ),
    ];

    let mut psi = ParamStore::new();
    metafilter::init_psi(&mut psi, 4, FilterShape::new(2, 1), r).expect("valid psi");
    cases.push(case(
        "generate_filter",
        vec![("neighborhood", rand_tensor(r, &[1, 36, 4, 4], -1.0, 1.0))],
        psi,
        |v, p| {
            let n = Neighborhood { patches: v[0] };
            Ok(metafilter::generate_filter(n, FilterShape::new(2, 1), p)?.weights)
        },
    ));

    let mut psi = ParamStore::new();
    metafilter::init_psi(&mut psi, 4, FilterShape::new(2, 3), r).expect("valid psi");
    cases.push(case(
        "deformable_filter",
        vec![
            ("support", rand_tensor(r, &[2, 4, 5, 5], -1.0, 1.0)),
            ("offsets", rand_offsets(r, &[3, 18, 5, 5])),
        ],
        psi,
        |v, p| {
            let field = OffsetField::new(v[1])?;
            Ok(metafilter::generate_filter_deformable(v[0], &[1, 0, 1], field, FilterShape::new(2, 3), p)?.weights)
        },
    ));

    let mut eta = ParamStore::new();
    eta.insert(sampler::ETA_WEIGHT, rand_tensor(r, &[18, 4, 5, 5], -0.2, 0.2)).expect("fresh");
    eta.insert(sampler::ETA_BIAS, rand_tensor(r, &[18], -0.5, 0.5)).expect("fresh");
    cases.push(case(
        "predict_offsets",
        vec![
            ("support", rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0)),
            ("query", rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0)),
        ],
        eta,
        |v, p| Ok(sampler::predict_offsets(v[0], v[1], p)?.offsets),
    ));

    let mut pair = ParamStore::new();
    pair.insert(sampler::ETA_WEIGHT, rand_tensor(r, &[18, 4, 5, 5], -0.1, 0.1)).expect("fresh");
    pair.insert(sampler::ETA_BIAS, rand_offsets(r, &[18])).expect("fresh");
    metafilter::init_psi(&mut pair, 2, FilterShape::new(2, 3), r).expect("valid psi");
    cases.push(case(
        "align_once",
        vec![
            ("support", rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0)),
            ("query", rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0)),
        ],
        pair,
        |v, p| metafilter::align_once(v[0], v[1], FilterShape::new(2, 3), p),
    ));

    let cfg = BackboneConfig {
        in_channels: 1,
        stage_channels: vec![3, 4],
        keep_last_pool: false,
        image_size: 6,
    };
    let mut bb = ParamStore::new();
    cfg.init_params(&mut bb, r).expect("valid backbone");
    cases.push(case(
        "embed",
        vec![("images", rand_tensor(r, &[2, 1, 6, 6], 0.0, 1.0))],
        bb,
        move |v, p| backbone::embed(v[0], &cfg, p),
    ));
    cases
}

/// A tiny 5-way 1-shot episode and matching model for end-to-end checks.
pub struct EpisodeFixture {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub input: EpisodeInput,
}

impl EpisodeFixture {
    pub fn new(ode: OdeConfig, dynamic_sampling: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                stage_channels: vec![3, 4],
                keep_last_pool: false,
                image_size: 8,
            },
            filter: FilterShape::new(2, 1),
            dynamic_sampling,
            ode,
            global_classes: 6,
        };
        let mut params = config.init_params(seed)?;
        if params.contains(sampler::ETA_WEIGHT) {
            // move the offsets off the integer grid, where sampling has kinks
            let w = params.get(sampler::ETA_WEIGHT).expect("present").shape().to_vec();
            params.set(sampler::ETA_WEIGHT, rand_tensor(&mut rng, &w, -0.05, 0.05))?;
            params.set(sampler::ETA_BIAS, rand_offsets(&mut rng, &[sampler::OFFSET_CHANNELS]))?;
        }
        let (n_way, queries) = (5, 5);
        let s = config.backbone.image_size;
        let input = EpisodeInput {
            n_way,
            support: rand_tensor(&mut rng, &[n_way, 1, s, s], 0.0, 1.0),
            support_slots: (0..n_way).collect(),
            query: rand_tensor(&mut rng, &[queries, 1, s, s], 0.0, 1.0),
            query_slots: vec![0, 1, 2, 3, 4],
            query_global: Some(vec![5, 0, 3, 1, 2]),
        };
        Ok(Self { config, params, input })
    }

    fn loss(&self, params: &ParamStore, steps: Option<&[f64]>) -> Result<f64> {
        let tape = Tape::inert();
        let out = match steps {
            Some(s) => model::forward_episode_replay(&tape, &self.config, params, &self.input, s)?,
            None => model::forward_episode(&tape, &self.config, params, &self.input)?,
        };
        out.total_loss.item()
    }

    /// Analytic vs numeric parameter gradients of the episode loss. Adaptive
    /// solves are differentiated with their accepted step sequence frozen.
    pub fn check(&self, name: &str) -> Result<Vec<GradCheck>> {
        let tape = Tape::new();
        let out = model::forward_episode(&tape, &self.config, &self.params, &self.input)?;
        let analytic = tape.backward(out.total_loss)?.for_params(&self.params);
        let adaptive = self.config.aligns() && self.config.ode.method == crate::ode::OdeMethod::Dopri5;
        let steps = adaptive.then(|| out.steps.clone());
        let numeric = finite_diff_grad(|p| self.loss(p, steps.as_deref()), &self.params, DEFAULT_STEP)?;
        let tolerance = if adaptive { SOLVER_TOLERANCE } else { TOLERANCE };
        Ok(numeric
            .iter()
            .map(|(param, n)| GradCheck {
                case: name.into(),
                wrt: param.clone(),
                rel_error: grad_error(&analytic[param], n),
                tolerance,
            })
            .collect())
    }
}

/// End-to-end configurations: name, solver, dynamic sampling.
pub fn episode_configs() -> Vec<(&'static str, OdeConfig, bool)> {
    let per_eval = OdeConfig {
        filter_refresh: FilterRefresh::PerEval,
        ..OdeConfig::euler(2)
    };
    vec![
        ("episode_no_align", OdeConfig::euler(0), false),
        ("episode_euler", OdeConfig::euler(1), true),
        ("episode_euler_static", OdeConfig::euler(2), false),
        ("episode_euler_per_eval", per_eval, true),
        ("episode_dopri5", OdeConfig::default(), true),
    ]
}

/// Names accepted by [`run_suite`].
pub fn case_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = op_cases(0).iter().map(|c| c.name).collect();
    names.extend(episode_configs().iter().map(|(n, _, _)| *n));
    names
}

/// Runs every case, or only the one called `only`.
pub fn run_suite(only: Option<&str>, seed: u64) -> Result<Vec<GradCheck>> {
    if let Some(name) = only {
        if !case_names().contains(&name) {
            return Err(invalid!("unknown gradient-check case {name:?}"));
        }
    }
    let wanted = |n: &str| only.is_none_or(|o| o == n);
    let mut checks = Vec::new();
    for c in op_cases(seed).iter().filter(|c| wanted(c.name)) {
        checks.extend(run_case(c)?);
    }
    for (name, ode, dynamic) in episode_configs() {
        if wanted(name) {
            checks.extend(EpisodeFixture::new(ode, dynamic, seed)?.check(name)?);
        }
    }
    Ok(checks)
}
