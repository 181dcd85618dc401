//! Configurations that collapse to simpler operators.

mod common;

use common::{align_params, rng, uniform};
use dynalign::data::{self, Augment, Split, SyntheticSpec};
use dynalign::metafilter::{self, FilterShape};
use dynalign::model::{self, Model};
use dynalign::ode::OdeConfig;
use dynalign::sampler::{self, OffsetField};
use dynalign::train::{self, TrainConfig};
use dynalign::{backbone, ops, Tape, Tensor};

#[test]
fn one_group_unit_kernel_scales_every_channel_alike() {
    let mut r = rng(3);
    let shape = FilterShape::new(1, 1);
    let p = align_params(6, shape, &mut r);
    let tape = Tape::inert();
    let s = tape.constant(uniform(&mut r, &[2, 6, 4, 5], -1.0, 1.0));
    let q = uniform(&mut r, &[2, 6, 4, 5], -1.0, 1.0);
    let f = metafilter::filter_for_pair(s, tape.constant(q.clone()), shape, &p).unwrap();
    let w = f.weights.value();
    assert_eq!(w.shape(), &[2, 1, 4, 5]);
    let y = metafilter::grouped_dynamic_conv(tape.constant(q.clone()), f).unwrap().value();
    let hw = 20;
    for b in 0..2 {
        for c in 0..6 {
            for i in 0..hw {
                let at = (b * 6 + c) * hw + i;
                assert!((y.data()[at] - w.data()[b * hw + i] * q.data()[at]).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn zero_offsets_reproduce_unfold_including_borders() {
    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64 + 1.0).unwrap();
    let tape = Tape::inert();
    let field = OffsetField::zeros(&tape, 2, 4, 4).unwrap();
    let gathered = sampler::bilinear_gather(tape.constant(x.clone()), field).unwrap().patches.value();
    let unfolded = ops::unfold(tape.constant(x), 3).unwrap().value();
    assert_eq!(gathered, unfolded);
    // top-left corner: the first grid point (-1, -1) falls outside and reads zero
    assert_eq!(gathered.data()[0], 0.0);
}

#[test]
fn zero_depth_leaves_query_features_unchanged() {
    let ds = data::generate_synthetic(&SyntheticSpec::default()).unwrap();
    let config = TrainConfig {
        ode: OdeConfig::euler(0),
        ..TrainConfig::default()
    };
    let model = Model::init(config.model_config(ds.split(Split::MetaTrain).len()), 5).unwrap();
    let mut r = rng(9);
    let input = train::episode_input(&ds, Split::MetaTrain, 5, 1, 2, Augment::None, false, &mut r).unwrap();
    let tape = Tape::inert();
    let out = model::forward_episode(&tape, &model.config, &model.params, &input).unwrap();
    assert!(out.offsets.is_none());
    assert!(out.steps.is_empty());
    // the backbone normalises over the whole episode batch
    let images = Tensor::concat_batch(&[&input.support, &input.query]).unwrap();
    let feats = backbone::embed(tape.constant(images), &model.config.backbone, &model.params)
        .unwrap()
        .value();
    let aligned = out.aligned.value();
    let per = feats.numel() / 15;
    for p in 0..50 {
        let q = 5 + p / 5;
        assert_eq!(aligned.data()[p * per..(p + 1) * per], feats.data()[q * per..(q + 1) * per]);
    }
}
