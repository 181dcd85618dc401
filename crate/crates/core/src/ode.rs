//! Iterated and continuous alignment.
//!
//! The integrators work on any vector field expressed as tape operations, so
//! the solution is differentiable by ordinary reverse-mode sweeps through the
//! accepted steps. Step sizes are computed from values and enter the tape as
//! constants; gradients therefore treat the step sequence as fixed.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metafilter::{self, FilterShape, MetaFilter};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    EulerFixed,
    Dopri5,
}

/// When the meta-filter is computed during integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRefresh {
    /// Once, from the initial query.
    Frozen,
    /// At every field evaluation, from the current state.
    PerEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub method: OdeMethod,
    #[serde(rename = "depth_T")]
    pub depth_t: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_evals: usize,
    pub t_span: [f64; 2],
    pub filter_refresh: FilterRefresh,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Dopri5,
            depth_t: 1,
            rtol: 1e-3,
            atol: 1e-4,
            max_evals: 1000,
            t_span: [0.0, 1.0],
            filter_refresh: FilterRefresh::Frozen,
        }
    }
}

impl OdeConfig {
    pub fn euler(depth_t: usize) -> Self {
        Self {
            method: OdeMethod::EulerFixed,
            depth_t,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(invalid!("rtol and atol must be positive"));
        }
        if !(self.t_span[0] < self.t_span[1]) {
            return Err(invalid!("t_span start must precede its end"));
        }
        if self.max_evals == 0 {
            return Err(invalid!("max_evals must be positive"));
        }
        Ok(())
    }

    /// True for the configuration that skips alignment entirely.
    pub fn is_identity(&self) -> bool {
        self.method == OdeMethod::EulerFixed && self.depth_t == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub function_evals: usize,
}

/// Result of an integration: the final state, counters and the accepted
/// step sizes (replayable with [`dopri5_replay`]).
#[derive(Debug)]
pub struct Solution<'t> {
    pub state: Var<'t>,
    pub stats: SolveStats,
    pub steps: Vec<f64>,
}

/// `X_{t+1} = X_t + step * F(X_t)` for `depth` steps.
pub fn euler<'t, F>(x0: Var<'t>, mut field: F, depth: usize, step: f64) -> Result<Solution<'t>>
where
    F: FnMut(Var<'t>) -> Result<Var<'t>>,
{
    let mut x = x0;
    let mut stats = SolveStats::default();
    for _ in 0..depth {
        let dx = field(x)?;
        stats.function_evals += 1;
        x = ops::lincomb(&[x, dx], &[1.0, step])?;
        stats.accepted_steps += 1;
    }
    Ok(Solution {
        state: x,
        stats,
        steps: vec![step; depth],
    })
}

// Dormand-Prince 5(4) tableau. The nodes are unused since the field is
// autonomous.
#[allow(dead_code)]
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// 5th-order weights (equal to the last row of `A`, FSAL).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn check_finite(v: Var<'_>, stats: SolveStats) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Solver {
            message: "state became non-finite".into(),
            stats,
        })
    }
}

struct Stepper<'t, F> {
    field: F,
    stats: SolveStats,
    max_evals: usize,
    _tape: std::marker::PhantomData<&'t ()>,
}

impl<'t, F> Stepper<'t, F>
where
    F: FnMut(Var<'t>) -> Result<Var<'t>>,
{
    fn eval(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.stats.function_evals >= self.max_evals {
            return Err(Error::Solver {
                message: format!("exceeded max_evals = {}", self.max_evals),
                stats: self.stats,
            });
        }
        self.stats.function_evals += 1;
        (self.field)(x)
    }

    /// One Dormand-Prince step of size `h` from `x` with `k1 = F(x)`.
    /// Returns the 5th-order state and the seven stage derivatives.
    fn step(&mut self, x: Var<'t>, k1: Var<'t>, h: f64) -> Result<(Var<'t>, [Var<'t>; 7])> {
        let mut ks = vec![k1];
        for row in A.iter().take(6).skip(1) {
            let mut terms = vec![x];
            let mut coeffs = vec![1.0];
            for (k, &a) in ks.iter().zip(row.iter()) {
                if a != 0.0 {
                    terms.push(*k);
                    coeffs.push(h * a);
                }
            }
            let stage = ops::lincomb(&terms, &coeffs)?;
            ks.push(self.eval(stage)?);
        }
        let mut terms = vec![x];
        let mut coeffs = vec![1.0];
        for (k, &b) in ks.iter().zip(B5.iter()) {
            if b != 0.0 {
                terms.push(*k);
                coeffs.push(h * b);
            }
        }
        let next = ops::lincomb(&terms, &coeffs)?;
        check_finite(next, self.stats)?;
        ks.push(self.eval(next)?);
        let ks: [Var<'t>; 7] = ks.try_into().expect("seven stages");
        Ok((next, ks))
    }
}

/// Scaled max-norm of the embedded error estimate.
fn error_norm(x: Var<'_>, next: Var<'_>, ks: &[Var<'_>; 7], h: f64, rtol: f64, atol: f64) -> f64 {
    let (xv, nv) = (x.value(), next.value());
    let kv: Vec<_> = ks.iter().map(|k| k.value()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..xv.numel() {
        let e: f64 = h * (0..7).map(|s| (B5[s] - B4[s]) * kv[s].data()[i]).sum::<f64>();
        let scale = atol + rtol * xv.data()[i].abs().max(nv.data()[i].abs());
        worst = worst.max(e.abs() / scale);
    }
    worst
}

/// Adaptive Dormand-Prince 5(4) integration of `dX/dt = F(X)` over
/// `config.t_span`, starting with `h0 = 0.1 * (t_end - t_start)`.
pub fn dopri5<'t, F>(x0: Var<'t>, field: F, config: &OdeConfig) -> Result<Solution<'t>>
where
    F: FnMut(Var<'t>) -> Result<Var<'t>>,
{
    config.validate()?;
    let [t0, t1] = config.t_span;
    let span = t1 - t0;
    let mut stepper = Stepper {
        field,
        stats: SolveStats::default(),
        max_evals: config.max_evals,
        _tape: std::marker::PhantomData,
    };
    let mut x = x0;
    let mut k1 = stepper.eval(x)?;
    let mut t = t0;
    let mut h = 0.1 * span;
    let mut steps = Vec::new();
    while t1 - t > 1e-12 * span {
        let h_try = h.min(t1 - t);
        let (next, ks) = stepper.step(x, k1, h_try)?;
        let err = error_norm(x, next, &ks, h_try, config.rtol, config.atol);
        if !err.is_finite() {
            return Err(Error::Solver {
                message: "error estimate is non-finite".into(),
                stats: stepper.stats,
            });
        }
        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            t = if t1 - (t + h_try) <= 1e-12 * span { t1 } else { t + h_try };
            x = next;
            k1 = ks[6];
            steps.push(h_try);
            stepper.stats.accepted_steps += 1;
        } else {
            stepper.stats.rejected_steps += 1;
        }
        h = h_try * factor;
    }
    Ok(Solution {
        state: x,
        stats: stepper.stats,
        steps,
    })
}

/// Replays a Dormand-Prince integration with a fixed step sequence, no
/// error control. Used to differentiate or finite-difference a solve without
/// the step sizes moving.
pub fn dopri5_replay<'t, F>(x0: Var<'t>, field: F, steps: &[f64], max_evals: usize) -> Result<Solution<'t>>
where
    F: FnMut(Var<'t>) -> Result<Var<'t>>,
{
    let mut stepper = Stepper {
        field,
        stats: SolveStats::default(),
        max_evals,
        _tape: std::marker::PhantomData,
    };
    let mut x = x0;
    let mut k1 = stepper.eval(x)?;
    for &h in steps {
        let (next, ks) = stepper.step(x, k1, h)?;
        x = next;
        k1 = ks[6];
        stepper.stats.accepted_steps += 1;
    }
    Ok(Solution {
        state: x,
        stats: stepper.stats,
        steps: steps.to_vec(),
    })
}

/// The right-hand side used for alignment.
pub enum AlignField<'t, 'p> {
    /// Meta-filter computed once from the initial pair.
    Frozen(MetaFilter<'t>),
    /// Meta-filter recomputed from `(support, X(t))` at each evaluation.
    PerEval {
        support: Var<'t>,
        shape: FilterShape,
        params: &'p ParamStore,
    },
    /// `F = 0`, a test hook.
    Zero,
}

impl<'t> AlignField<'t, '_> {
    pub fn new<'p>(
        support: Var<'t>,
        query: Var<'t>,
        shape: FilterShape,
        refresh: FilterRefresh,
        params: &'p ParamStore,
    ) -> Result<AlignField<'t, 'p>> {
        Ok(match refresh {
            FilterRefresh::Frozen => {
                AlignField::Frozen(metafilter::filter_for_pair(support, query, shape, params)?)
            }
            FilterRefresh::PerEval => AlignField::PerEval { support, shape, params },
        })
    }

    pub fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            AlignField::Frozen(filter) => metafilter::grouped_dynamic_conv(x, *filter),
            AlignField::PerEval { support, shape, params } => {
                let filter = metafilter::filter_for_pair(*support, x, *shape, params)?;
                metafilter::grouped_dynamic_conv(x, filter)
            }
            AlignField::Zero => ops::scale(x, 0.0),
        }
    }
}

/// Fixed-depth recursive alignment `X_{t+1} = X_t + F(X_t)`.
pub fn euler_align<'t>(
    support: Var<'t>,
    query: Var<'t>,
    shape: FilterShape,
    depth_t: usize,
    refresh: FilterRefresh,
    params: &ParamStore,
) -> Result<Solution<'t>> {
    if depth_t == 0 {
        return euler(query, Ok, 0, 1.0);
    }
    let field = AlignField::new(support, query, shape, refresh, params)?;
    euler(query, |x| field.eval(x), depth_t, 1.0)
}

/// Alignment as the time-1 flow of `dX/dt = F(X)` with adaptive
/// Dormand-Prince stepping.
pub fn dopri5_align<'t>(
    support: Var<'t>,
    query: Var<'t>,
    shape: FilterShape,
    config: &OdeConfig,
    params: &ParamStore,
) -> Result<Solution<'t>> {
    let field = AlignField::new(support, query, shape, config.filter_refresh, params)?;
    dopri5(query, |x| field.eval(x), config)
}
