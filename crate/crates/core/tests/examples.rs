//! Worked examples for the individual operations.

mod common;

use common::{align_params, max_rel, rng, uniform};
use dynalign::heads::{self, EpisodeScores};
use dynalign::metafilter::{self, FilterShape, MetaFilter, PSI_BIAS, PSI_WEIGHT};
use dynalign::sampler::{self, Neighborhood, OffsetField};
use dynalign::{ops, reference, ParamStore, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn conv_scalar_kernel_scales() {
    let tape = Tape::inert();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = ops::conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(y.value(), Tensor::full(&[1, 1, 3, 3], 2.0).unwrap());
}

#[test]
fn grouped_identity_conv() {
    let tape = Tape::inert();
    let x = tape.constant(uniform(&mut rng(0), &[1, 2, 2, 2], -1.0, 1.0));
    let w = tape.constant(t(&[2, 1, 1, 1], &[1.0, 1.0]));
    let y = ops::conv2d(x, w, None, 1, 0, 2).unwrap();
    assert_eq!(y.value(), x.value());
}

#[test]
fn grouped_conv_matches_loops() {
    let mut r = rng(1);
    let x = uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[6, 2, 3, 3], -1.0, 1.0);
    let tape = Tape::inert();
    let y = ops::conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, 1, 1, 2).unwrap();
    let want = reference::conv2d(&x, &w, None, 1, 1, 2).unwrap();
    assert!(max_rel(y.value().data(), want.data()) <= 1e-12);
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let tape = Tape::inert();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
    let msg = ops::conv2d(x, w, None, 1, 1, 1).unwrap_err().to_string();
    assert!(msg.contains("channel"), "{msg}");
}

#[test]
fn sigmoid_values() {
    let tape = Tape::inert();
    let y = ops::sigmoid(tape.constant(t(&[2], &[0.0, 2.0]))).unwrap().value();
    assert_eq!(y.data()[0], 0.5);
    assert!((y.data()[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    assert!((y.data()[1] - 0.880797).abs() < 1e-6);
}

#[test]
fn concat_keeps_channel_order() {
    let tape = Tape::inert();
    let a = uniform(&mut rng(2), &[1, 2, 4, 4], -1.0, 1.0);
    let b = uniform(&mut rng(3), &[1, 3, 4, 4], -1.0, 1.0);
    let y = ops::concat_channels(&[tape.constant(a.clone()), tape.constant(b.clone())]).unwrap().value();
    assert_eq!(y.shape(), [1, 5, 4, 4]);
    assert_eq!(&y.data()[..32], a.data());
    assert_eq!(&y.data()[32..], b.data());
}

#[test]
fn unfold_examples() {
    let tape = Tape::inert();
    let x = uniform(&mut rng(4), &[1, 2, 4, 4], -1.0, 1.0);
    assert_eq!(ops::unfold(tape.constant(x.clone()), 1).unwrap().value(), x);

    let y = ops::unfold(tape.constant(t(&[1, 1, 1, 1], &[7.0])), 3).unwrap().value();
    assert_eq!(y.shape(), [1, 9, 1, 1]);
    assert_eq!(y.data(), [0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 0.0]);

    let y = ops::unfold(tape.constant(x.clone()), 3).unwrap().value();
    assert_eq!(y, reference::unfold(&x, 3).unwrap());
}

#[test]
fn pooling_examples() {
    let tape = Tape::inert();
    let c = ops::global_avg_pool(tape.constant(Tensor::full(&[2, 3, 4, 4], 3.0).unwrap())).unwrap().value();
    assert!(c.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    let m = ops::max_pool2(tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))).unwrap().value();
    assert_eq!(m.data(), [4.0]);
    let x = uniform(&mut rng(5), &[1, 3, 5, 5], -1.0, 1.0);
    let s = ops::spatial_mean(tape.constant(x.clone())).unwrap().value();
    assert!(max_rel(s.data(), reference::spatial_mean(&x).unwrap().data()) <= 1e-12);
}

#[test]
fn log_softmax_examples() {
    let tape = Tape::inert();
    let y = ops::log_softmax(tape.constant(Tensor::full(&[1, 5], 0.3).unwrap())).unwrap().value();
    assert!(y.data().iter().all(|&v| (v + 5f64.ln()).abs() < 1e-12));
    assert!((y.data()[0] + 1.60944).abs() < 1e-5);
    let y = ops::log_softmax(tape.constant(t(&[1, 2], &[10.0, 0.0]))).unwrap().value();
    let lse = (10f64.exp() + 1.0).ln();
    assert!((y.data()[0] - (10.0 - lse)).abs() < 1e-14);
    assert!((y.data()[1] + lse).abs() < 1e-14);
    assert!((y.data()[0] + 4.54e-5).abs() < 1e-7);
}

#[test]
fn dense_identity() {
    let tape = Tape::inert();
    let x = uniform(&mut rng(6), &[3, 4], -1.0, 1.0);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).unwrap();
    let y = ops::dense(tape.constant(x.clone()), tape.constant(eye), tape.constant(Tensor::zeros(&[4]).unwrap()));
    assert_eq!(y.unwrap().value(), x);
}

#[test]
fn backward_of_linear_form_and_unused_leaf() {
    let tape = Tape::new();
    let x = uniform(&mut rng(7), &[6], -1.0, 1.0);
    let w = tape.leaf(uniform(&mut rng(8), &[6], -1.0, 1.0));
    let unused = tape.leaf(Tensor::full(&[3], 1.0).unwrap());
    let root = ops::sum(ops::mul(w, tape.constant(x.clone())).unwrap()).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.wrt(w), x);
    assert!(g.wrt(unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_eta_gives_zero_offsets() {
    let mut p = ParamStore::new();
    sampler::init_eta(&mut p, 3).unwrap();
    let tape = Tape::inert();
    let s = tape.constant(uniform(&mut rng(9), &[1, 3, 4, 4], -1.0, 1.0));
    let q = tape.constant(uniform(&mut rng(10), &[1, 3, 4, 4], -1.0, 1.0));
    let f = sampler::predict_offsets(s, q, &p).unwrap();
    assert!(f.offsets.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn offsets_are_deterministic() {
    let run = || {
        let mut r = rng(11);
        let p = align_params(4, FilterShape::new(2, 1), &mut r);
        let tape = Tape::inert();
        let s = tape.constant(uniform(&mut r, &[1, 4, 5, 5], -1.0, 1.0));
        let q = tape.constant(uniform(&mut r, &[1, 4, 5, 5], -1.0, 1.0));
        sampler::predict_offsets(s, q, &p).unwrap().offsets.value()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_offsets_copy_interior_neighbourhood() {
    let x = uniform(&mut rng(12), &[1, 2, 5, 5], -1.0, 1.0);
    let tape = Tape::inert();
    let field = OffsetField::zeros(&tape, 1, 5, 5).unwrap();
    let got = sampler::bilinear_gather(tape.constant(x.clone()), field).unwrap().patches.value();
    for ch in 0..2 {
        for (p, &(dy, dx)) in sampler::GRID.iter().enumerate() {
            for i in 1..4 {
                for j in 1..4 {
                    let want = x.at4(0, ch, (i as i32 + dy) as usize, (j as i32 + dx) as usize);
                    assert_eq!(got.at4(0, ch * 9 + p, i, j), want);
                }
            }
        }
    }
}

#[test]
fn half_pixel_offset_interpolates_midpoint() {
    // centre point of (0, 0) moved right by half a pixel: between 2 and 4
    let x = t(&[1, 1, 1, 2], &[2.0, 4.0]);
    let mut off = vec![0.0; 18 * 2];
    off[9 * 2] = 0.5; // channel 2*4+1 (dx of the centre point), position 0
    let tape = Tape::inert();
    let field = OffsetField::new(tape.constant(t(&[1, 18, 1, 2], &off))).unwrap();
    let got = sampler::bilinear_gather(tape.constant(x), field).unwrap().patches.value();
    assert_eq!(got.at4(0, 4, 0, 0), 3.0);
}

#[test]
fn random_gather_matches_loops() {
    let mut r = rng(13);
    let x = uniform(&mut r, &[1, 3, 6, 6], -1.0, 1.0);
    let off = uniform(&mut r, &[1, 18, 6, 6], -2.0, 2.0);
    let tape = Tape::inert();
    let field = OffsetField::new(tape.constant(off.clone())).unwrap();
    let got = sampler::bilinear_gather(tape.constant(x.clone()), field).unwrap().patches.value();
    assert!(max_rel(got.data(), reference::bilinear_gather(&x, &off).unwrap().data()) <= 1e-12);
}

fn filter_with(weight: f64, bias: f64, shape: FilterShape, patches: Tensor) -> Tensor {
    let c = patches.shape()[1] / 9;
    let mut p = ParamStore::new();
    p.insert(PSI_WEIGHT, Tensor::full(&[shape.filter_channels(), c, 3, 3], weight).unwrap()).unwrap();
    p.insert(PSI_BIAS, Tensor::full(&[shape.filter_channels()], bias).unwrap()).unwrap();
    let tape = Tape::inert();
    let n = Neighborhood {
        patches: tape.constant(patches),
    };
    metafilter::generate_filter(n, shape, &p).unwrap().weights.value()
}

#[test]
fn generator_saturation_examples() {
    let patches = uniform(&mut rng(14), &[1, 36, 3, 3], -1.0, 1.0);
    let half = filter_with(0.0, 0.0, FilterShape::new(2, 3), patches.clone());
    assert!(half.data().iter().all(|&v| v == 0.5));
    let one = filter_with(0.0, 20.0, FilterShape::new(2, 3), patches);
    assert!(one.data().iter().all(|&v| (1.0 - v).abs() < 1e-8));
}

#[test]
fn generator_matches_dense_reference() {
    let mut r = rng(15);
    let patches = uniform(&mut r, &[1, 8 * 9, 4, 4], -1.0, 1.0);
    let mut p = ParamStore::new();
    metafilter::init_psi(&mut p, 8, FilterShape::new(4, 1), &mut r).unwrap();
    let tape = Tape::inert();
    let n = Neighborhood {
        patches: tape.constant(patches.clone()),
    };
    let got = metafilter::generate_filter(n, FilterShape::new(4, 1), &p).unwrap().weights.value();
    let want = reference::generate_filter(&patches, p.get(PSI_WEIGHT).unwrap(), p.get(PSI_BIAS).unwrap()).unwrap();
    assert!(max_rel(got.data(), want.data()) <= 1e-12);
}

#[test]
fn diagonal_and_broadcast_filters() {
    let mut r = rng(16);
    let q = uniform(&mut r, &[1, 4, 3, 3], -1.0, 1.0);
    let tape = Tape::inert();
    // g = c: every channel has its own scalar
    let w = uniform(&mut r, &[1, 4, 3, 3], 0.0, 1.0);
    let f = MetaFilter {
        weights: tape.constant(w.clone()),
        shape: FilterShape::new(4, 1),
    };
    let y = metafilter::grouped_dynamic_conv(tape.constant(q.clone()), f).unwrap().value();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - w.data()[i] * q.data()[i]).abs() < 1e-15);
    }
    // g = 1: one scalar per position shared by all channels
    let w = uniform(&mut r, &[1, 1, 3, 3], 0.0, 1.0);
    let f = MetaFilter {
        weights: tape.constant(w.clone()),
        shape: FilterShape::new(1, 1),
    };
    let y = metafilter::grouped_dynamic_conv(tape.constant(q.clone()), f).unwrap().value();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - w.data()[i % 9] * q.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn dynamic_conv_matches_loops() {
    let mut r = rng(17);
    let q = uniform(&mut r, &[1, 8, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[1, 36, 5, 5], 0.0, 1.0);
    let tape = Tape::inert();
    let f = MetaFilter {
        weights: tape.constant(w.clone()),
        shape: FilterShape::new(4, 3),
    };
    let y = metafilter::grouped_dynamic_conv(tape.constant(q.clone()), f).unwrap().value();
    assert!(max_rel(y.data(), reference::grouped_dynamic_conv(&q, &w, 4, 3).unwrap().data()) <= 1e-12);
}

#[test]
fn align_once_examples() {
    let mut r = rng(18);
    let shape = FilterShape::new(2, 1);
    let mut p = align_params(4, shape, &mut r);
    let s = uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let q = uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));

    // |X^ - X| = w |X| < |X| with w in (0, 1)
    let y = metafilter::align_once(sv, qv, shape, &p).unwrap().value();
    for (a, b) in y.data().iter().zip(q.data()) {
        assert!((a - b).abs() < b.abs() || *b == 0.0);
    }

    let zero = tape.constant(Tensor::zeros(&[1, 4, 4, 4]).unwrap());
    let y = metafilter::align_once(sv, zero, shape, &p).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    p.set(PSI_WEIGHT, Tensor::zeros(&[2, 4, 3, 3]).unwrap()).unwrap();
    p.set(PSI_BIAS, Tensor::zeros(&[2]).unwrap()).unwrap();
    // parameters are bound once per tape
    let tape = Tape::inert();
    let (sv, qv) = (tape.constant(s), tape.constant(q.clone()));
    let y = metafilter::align_once(sv, qv, shape, &p).unwrap().value();
    for (a, b) in y.data().iter().zip(q.data()) {
        assert!((a - 1.5 * b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn meta_classify_examples() {
    let tape = Tape::inert();
    let ones = tape.constant(Tensor::full(&[1, 4, 3, 3], 1.0).unwrap());
    let y = heads::meta_classify(ones, ones).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 4.0));

    // prototype mean (1, -1); query (1, 1) at every position
    let p = tape.constant(t(&[1, 2, 1, 1], &[1.0, -1.0]));
    let q = tape.constant(t(&[1, 2, 1, 1], &[1.0, 1.0]));
    assert_eq!(heads::meta_classify(p, q).unwrap().value().data(), [0.0]);

    let mut r = rng(19);
    let p = uniform(&mut r, &[1, 8, 4, 4], -1.0, 1.0);
    let q = uniform(&mut r, &[1, 8, 4, 4], -1.0, 1.0);
    let y = heads::meta_classify(tape.constant(p.clone()), tape.constant(q.clone())).unwrap().value();
    assert!(max_rel(y.data(), reference::meta_classify(&p, &q).unwrap().data()) <= 1e-12);
}

fn fewshot(maps: Tensor, class: usize) -> f64 {
    let tape = Tape::inert();
    let scores = EpisodeScores::new(tape.constant(maps)).unwrap();
    heads::fewshot_loss(scores, &[class]).unwrap().item().unwrap()
}

#[test]
fn fewshot_loss_examples() {
    let same = Tensor::full(&[1, 5, 3, 3], 0.2).unwrap();
    assert!((fewshot(same, 2) - 5f64.ln()).abs() < 1e-12);

    let margin = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == 1 { 20.0 } else { 0.0 }).unwrap();
    assert!(fewshot(margin, 1) <= 1e-7);

    let three = Tensor::from_fn(&[1, 3, 2, 2], |i| 1.0 - (i / 4) as f64).unwrap();
    assert!((fewshot(three, 0) - 0.40761).abs() < 1e-5);
}

#[test]
fn global_loss_examples() {
    let mut p = ParamStore::new();
    p.insert(heads::GLOBAL_WEIGHT, Tensor::zeros(&[64, 4]).unwrap()).unwrap();
    p.insert(heads::GLOBAL_BIAS, Tensor::zeros(&[64]).unwrap()).unwrap();
    let tape = Tape::inert();
    let x = tape.constant(uniform(&mut rng(20), &[1, 4, 3, 3], -1.0, 1.0));
    let l = heads::global_loss(x, &[5], &p).unwrap().item().unwrap();
    assert!((l - 64f64.ln()).abs() < 1e-12);
    assert!((l - 4.1589).abs() < 1e-4);

    let bias = Tensor::from_fn(&[64], |i| if i == 5 { 20.0 } else { 0.0 }).unwrap();
    p.set(heads::GLOBAL_BIAS, bias).unwrap();
    p.set(heads::GLOBAL_WEIGHT, Tensor::zeros(&[64, 4]).unwrap()).unwrap();
    let tape = Tape::inert();
    let x = tape.constant(x.value());
    let l = heads::global_loss(x, &[5], &p).unwrap().item().unwrap();
    assert!(l <= 64.0 * (-20f64).exp(), "{l}");

    // random logits through the bias, checked against an explicit softmax
    let logits = uniform(&mut rng(21), &[8], -2.0, 2.0);
    let mut p = ParamStore::new();
    p.insert(heads::GLOBAL_WEIGHT, Tensor::zeros(&[8, 4]).unwrap()).unwrap();
    p.insert(heads::GLOBAL_BIAS, logits.clone()).unwrap();
    let tape = Tape::inert();
    let x = tape.constant(x.value());
    let l = heads::global_loss(x, &[3], &p).unwrap().item().unwrap();
    let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
    let want = -(logits.data()[3].exp() / z).ln();
    assert!((l - want).abs() <= 1e-10 * want.abs());
}

#[test]
fn total_loss_examples() {
    let tape = Tape::inert();
    let total = |a: f64, b: f64| {
        heads::total_loss(tape.constant(Tensor::scalar(a)), tape.constant(Tensor::scalar(b)))
            .unwrap()
            .item()
            .unwrap()
    };
    assert_eq!(total(0.0, 0.0), 0.0);
    assert_eq!(total(1.0, 2.0), 2.0);
    assert!((total(5f64.ln(), 64f64.ln()) - 3.68888).abs() < 1e-4);
}

#[test]
fn predict_examples() {
    assert_eq!(heads::predict(&[0.1, 0.9, 0.2, 0.05, 0.3]), 1);
    assert_eq!(heads::predict(&[0.4; 5]), 0);
}
