//! Data generation, episode sampling, training and evaluation.

mod common;

use common::rng;
use dynalign::data::{self, Split, SyntheticSpec};
use dynalign::model::forward_episode;
use dynalign::ode::OdeConfig;
use dynalign::train::{self, TrainConfig};
use dynalign::{Model, Tape};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        meta_train_classes: 5,
        samples_per_class: 10,
        image_size: 16,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> TrainConfig {
    serde_json::from_str(
        r#"{"lr0": 0.02, "momentum": 0.9, "epochs": 2, "episodes_per_epoch": 3, "N": 3, "K": 1, "Q": 2, "g": 2, "k": 1,
            "seed": 11, "backbone": {"in_channels": 1, "stage_channels": [4, 8], "image_size": 16}}"#,
    )
    .unwrap()
}

#[test]
fn generated_images_are_in_unit_range() {
    let ds = data::generate_synthetic(&SyntheticSpec::default()).unwrap();
    for class in &ds.classes {
        for img in &class.samples {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn class_selection_is_uniform() {
    let spec = SyntheticSpec {
        num_classes: 10,
        meta_train_classes: 10,
        samples_per_class: 4,
        ..SyntheticSpec::default()
    };
    let ds = data::generate_synthetic(&spec).unwrap();
    let episodes = 10_000;
    let mut counts = [0usize; 10];
    let mut r = rng(0);
    for _ in 0..episodes {
        let ep = data::sample_episode(&ds, Split::MetaTrain, 5, 1, 1, &mut r).unwrap();
        for &c in &ep.slot_map {
            counts[c] += 1;
        }
    }
    // each class is picked with probability 1/2 per episode
    let (mean, sd) = (episodes as f64 * 0.5, (episodes as f64 * 0.25).sqrt());
    for (c, &n) in counts.iter().enumerate() {
        assert!((n as f64 - mean).abs() <= 3.0 * sd, "class {c}: {n}");
    }
}

/// 5-way 1-shot nearest centroid on raw pixels, meta-test split.
#[test]
fn raw_pixel_nearest_centroid_beats_chance() {
    let spec = SyntheticSpec {
        num_classes: 20,
        meta_train_classes: 12,
        ..SyntheticSpec::default()
    };
    let ds = data::generate_synthetic(&spec).unwrap();
    let mut r = rng(1);
    let (mut correct, mut total) = (0, 0);
    for _ in 0..300 {
        let ep = data::sample_episode(&ds, Split::MetaTest, 5, 1, 6, &mut r).unwrap();
        let pixels = |item: &data::EpisodeItem| ds.class(item.class_id).unwrap().samples[item.sample].data().to_vec();
        let protos: Vec<Vec<f64>> = ep.support.iter().map(pixels).collect();
        for q in &ep.query {
            let x = pixels(q);
            let dist = |p: &Vec<f64>| p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..5).min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b]))).unwrap();
            correct += usize::from(best == q.slot);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.2, "{acc}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let config = TrainConfig {
        lr0: 0.0,
        weight_decay: 0.0,
        ..small_config()
    };
    let outcome = train::train(&config, &ds, |_| {}).unwrap();
    let fresh = Model::init(config.model_config(5), train::derive_seed(config.seed, u64::MAX)).unwrap();
    for (name, t) in fresh.params.iter() {
        assert_eq!(outcome.model.params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let run = || {
        let mut lines = Vec::new();
        let out = train::train(&small_config(), &ds, |m| lines.push(serde_json::to_string(m).unwrap())).unwrap();
        (lines, out.model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    for (name, t) in pa.iter() {
        assert_eq!(pb.get(name).unwrap(), t);
    }
}

#[test]
fn variants_differ_only_in_alignment_parameters() {
    let zero = TrainConfig {
        ode: OdeConfig::euler(0),
        ..small_config()
    };
    let names = |c: &TrainConfig| -> Vec<String> {
        let p = c.model_config(5).init_params(0).unwrap();
        p.names().map(str::to_owned).collect()
    };
    let (a, b) = (names(&zero), names(&small_config()));
    let strip = |v: &[String]| -> Vec<String> {
        v.iter()
            .filter(|n| !n.starts_with("psi.") && !n.starts_with("eta."))
            .cloned()
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(b.iter().any(|n| n.starts_with("psi.")) && b.iter().any(|n| n.starts_with("eta.")));
    assert!(!a.iter().any(|n| n.starts_with("psi.") || n.starts_with("eta.")));
}

#[test]
fn metrics_lines_have_the_documented_fields() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let out = train::train(&small_config(), &ds, |_| {}).unwrap();
    let line = serde_json::to_value(&out.metrics[0]).unwrap();
    for key in ["epoch", "loss", "acc", "lr"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    let report = train::evaluate(&out.model, &ds, Split::MetaTest, 10, 3, 1, 2, 0).unwrap();
    let line = serde_json::to_value(&report.summary).unwrap();
    for key in ["mean_acc", "ci95", "episodes"] {
        assert!(line.get(key).is_some(), "{key}");
    }
}

#[test]
fn evaluation_is_seeded() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let model = Model::init(small_config().model_config(5), 0).unwrap();
    let a = train::evaluate(&model, &ds, Split::MetaTest, 12, 3, 1, 2, 4).unwrap();
    let b = train::evaluate(&model, &ds, Split::MetaTest, 12, 3, 1, 2, 4).unwrap();
    assert_eq!(a.accuracies, b.accuracies);
}

#[test]
fn ci95_examples() {
    assert_eq!(train::mean_ci95(&[1.0; 50]), (1.0, 0.0));
    // sample standard deviation exactly 1 over 400 episodes
    let a = (399.0f64 / 400.0).sqrt();
    let samples: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 0.5 - a } else { 0.5 + a }).collect();
    let (mean, ci) = train::mean_ci95(&samples);
    assert!((mean - 0.5).abs() < 1e-15);
    assert!((ci - 0.098).abs() < 1e-12, "{ci}");
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let model = train::train(&small_config(), &ds, |_| {}).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    let mut r = rng(5);
    let input = train::episode_input(&ds, Split::MetaTest, 3, 1, 2, data::Augment::None, false, &mut r).unwrap();
    let (t1, t2) = (Tape::inert(), Tape::inert());
    let a = forward_episode(&t1, &model.config, &model.params, &input).unwrap();
    let b = forward_episode(&t2, &back.config, &back.params, &input).unwrap();
    assert_eq!(a.scores.maps.value(), b.scores.maps.value());
}

#[test]
fn divergence_reports_the_episode_seed() {
    let ds = data::generate_synthetic(&small_spec()).unwrap();
    let config = TrainConfig {
        lr0: 1e6,
        momentum: 0.0,
        epochs: 3,
        ..small_config()
    };
    let err = train::train(&config, &ds, |_| {}).map(|_| ()).unwrap_err();
    match err {
        dynalign::Error::Diverged { episode_seed, .. } => {
            assert!(err.to_string().contains(&format!("episode seed {episode_seed}")));
        }
        e => panic!("expected divergence, got {e}"),
    }
}
