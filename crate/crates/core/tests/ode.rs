mod common;

use common::{align_params, max_rel, rng, uniform};
use dynalign::metafilter::{self, FilterShape};
use dynalign::ode::{self, AlignField, FilterRefresh, OdeConfig};
use dynalign::{ops, Tape, Tensor};

const C: usize = 8;

/// A frozen k = 1 field: `dX/dt = w (.) X` with `w` broadcast over groups.
fn frozen_case(seed: u64, groups: usize) -> (Tensor, Tensor, dynalign::ParamStore, FilterShape) {
    let mut r = rng(seed);
    let shape = FilterShape::new(groups, 1);
    let params = align_params(C, shape, &mut r);
    let support = uniform(&mut r, &[1, C, 5, 5], -1.0, 1.0);
    let query = uniform(&mut r, &[1, C, 5, 5], -1.0, 1.0);
    (support, query, params, shape)
}

/// Per-channel expansion of the filter weights, `[1, C, h, w]`.
fn expand(weights: &Tensor, groups: usize) -> Vec<f64> {
    let (_, _, h, w) = weights.dims4().unwrap();
    let hw = h * w;
    (0..C)
        .flat_map(|ch| {
            let g = ch * groups / C;
            weights.data()[g * hw..][..hw].to_vec()
        })
        .collect()
}

#[test]
fn frozen_k1_flow_matches_exponential() {
    let (s, q, params, shape) = frozen_case(1, 4);
    for rtol in [1e-3, 1e-5] {
        let tape = Tape::inert();
        let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));
        let filter = metafilter::filter_for_pair(sv, qv, shape, &params).unwrap();
        let w = expand(&filter.weights.value(), 4);
        let config = OdeConfig::dopri5(rtol, rtol * 1e-3);
        let sol = ode::dopri5(qv, |x| metafilter::grouped_dynamic_conv(x, filter), &config).unwrap();
        let exact: Vec<f64> = q.data().iter().zip(&w).map(|(x, w)| x * w.exp()).collect();
        let err = max_rel(sol.state.value().data(), &exact);
        assert!(err <= 10.0 * rtol, "rtol {rtol}: error {err}");
    }
}

#[test]
fn decay_reaches_inverse_e() {
    for rtol in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
        let tape = Tape::inert();
        let config = OdeConfig::dopri5(rtol, rtol * 1e-3);
        let sol = ode::dopri5(tape.constant(Tensor::scalar(1.0)), |x| ops::scale(x, -1.0), &config).unwrap();
        let got = sol.state.item().unwrap();
        assert!((got - 0.367879).abs() <= 10.0 * rtol + 5e-7, "rtol {rtol}: {got}");
    }
}

/// Accepted steps of `dx/dt = rate * x` on `[0, 1]` for each tolerance.
fn decay_step_counts(rate: f64) -> Vec<usize> {
    [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&rtol| {
            let tape = Tape::inert();
            let config = OdeConfig::dopri5(rtol, rtol * 1e-3);
            let sol = ode::dopri5(tape.constant(Tensor::scalar(1.0)), |x| ops::scale(x, rate), &config).unwrap();
            sol.stats.accepted_steps
        })
        .collect()
}

#[test]
fn tighter_tolerance_takes_more_steps() {
    let counts = decay_step_counts(-5.0);
    assert!(counts.windows(2).all(|p| p[0] < p[1]), "{counts:?}");
    // at rate -1 the first three steps are capped by growth, not error
    let slow = decay_step_counts(-1.0);
    assert!(slow.windows(2).all(|p| p[0] <= p[1]) && slow[0] < slow[4], "{slow:?}");
}

#[test]
fn step_count_depends_on_filter_magnitude() {
    let steps = |w: f64| {
        let tape = Tape::inert();
        let q = tape.constant(Tensor::full(&[1, 4, 3, 3], 1.0).unwrap());
        let filter = metafilter::MetaFilter {
            weights: tape.constant(Tensor::full(&[1, 2, 3, 3], w).unwrap()),
            shape: FilterShape::new(2, 1),
        };
        let sol = ode::dopri5(q, |x| metafilter::grouped_dynamic_conv(x, filter), &OdeConfig::dopri5(1e-5, 1e-8)).unwrap();
        sol.stats.accepted_steps
    };
    let (small, large) = (steps(0.01), steps(0.99));
    assert!(small < large, "{small} vs {large}");
}

#[test]
fn euler_converges_to_dopri5() {
    let (s, q, params, shape) = frozen_case(2, 2);
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s), tape.constant(q));
    let field = AlignField::new(sv, qv, shape, FilterRefresh::Frozen, &params).unwrap();
    let reference = ode::dopri5(qv, |x| field.eval(x), &OdeConfig::dopri5(1e-10, 1e-12)).unwrap();
    let target = reference.state.value();
    let errors: Vec<f64> = [1, 2, 4, 8, 16]
        .iter()
        .map(|&t| {
            let sol = ode::euler(qv, |x| field.eval(x), t, 1.0 / t as f64).unwrap();
            max_rel(sol.state.value().data(), target.data())
        })
        .collect();
    assert!(errors.windows(2).all(|p| p[1] < p[0]), "{errors:?}");
}

#[test]
fn zero_field_takes_whole_span() {
    let tape = Tape::inert();
    let x0 = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.7).unwrap());
    let sol = ode::dopri5(x0, |x| AlignField::Zero.eval(x), &OdeConfig::default()).unwrap();
    assert_eq!(sol.state.value(), x0.value());
    // h0 = 0.1 and the step may grow at most fivefold per step
    assert_eq!(sol.steps, vec![0.1, 0.5, 0.4]);
}

#[test]
fn euler_depth_zero_is_identity() {
    let (s, q, params, shape) = frozen_case(3, 4);
    let tape = Tape::inert();
    let sol = ode::euler_align(tape.constant(s), tape.constant(q.clone()), shape, 0, FilterRefresh::Frozen, &params)
        .unwrap();
    assert_eq!(sol.state.value(), q);
    assert_eq!(sol.stats.function_evals, 0);
}

#[test]
fn euler_depth_one_is_align_once() {
    let (s, q, params, shape) = frozen_case(4, 4);
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s), tape.constant(q));
    let sol = ode::euler_align(sv, qv, shape, 1, FilterRefresh::Frozen, &params).unwrap();
    let once = metafilter::align_once(sv, qv, shape, &params).unwrap();
    assert_eq!(sol.state.value(), once.value());
}

#[test]
fn euler_depth_three_is_cubic_growth() {
    let (s, q, params, shape) = frozen_case(5, 8);
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s), tape.constant(q.clone()));
    let w = expand(&metafilter::filter_for_pair(sv, qv, shape, &params).unwrap().weights.value(), 8);
    let sol = ode::euler_align(sv, qv, shape, 3, FilterRefresh::Frozen, &params).unwrap();
    let exact: Vec<f64> = q.data().iter().zip(&w).map(|(x, w)| x * (1.0 + w).powi(3)).collect();
    assert!(max_rel(sol.state.value().data(), &exact) <= 1e-12);
}

#[test]
fn per_eval_refresh_differs_from_frozen() {
    let (s, q, params, shape) = frozen_case(6, 4);
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s), tape.constant(q));
    let frozen = ode::euler_align(sv, qv, shape, 2, FilterRefresh::Frozen, &params).unwrap();
    let live = ode::euler_align(sv, qv, shape, 2, FilterRefresh::PerEval, &params).unwrap();
    assert_ne!(frozen.state.value(), live.state.value());
}

#[test]
fn eval_budget_aborts_with_stats() {
    let tape = Tape::inert();
    let config = OdeConfig {
        max_evals: 10,
        ..OdeConfig::dopri5(1e-8, 1e-10)
    };
    let err = ode::dopri5(tape.constant(Tensor::scalar(1.0)), |x| ops::scale(x, -5.0), &config).unwrap_err();
    match err {
        dynalign::Error::Solver { stats, .. } => assert!(stats.function_evals <= 10),
        e => panic!("unexpected error {e}"),
    }
}
