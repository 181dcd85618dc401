//! Episodic SGD training with cosine learning-rate decay, and evaluation with
//! 95% confidence intervals.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{self, Augment, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::metafilter::FilterShape;
use crate::model::{forward_episode, EpisodeInput, Model, ModelConfig};
use crate::ode::OdeConfig;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Training configuration. JSON field names (`N`, `K`, `Q`, `g`, `k`, ...)
/// are the configuration-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Classical momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    #[serde(rename = "N")]
    pub n_way: usize,
    #[serde(rename = "K")]
    pub k_shot: usize,
    #[serde(rename = "Q")]
    pub n_query: usize,
    pub g: usize,
    pub k: usize,
    pub ode: OdeConfig,
    pub seed: u64,
    pub augment: Augment,
    pub backbone: BackboneConfig,
    pub dynamic_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            weight_decay: 5e-4,
            momentum: 0.0,
            epochs: 30,
            episodes_per_epoch: 100,
            n_way: 5,
            k_shot: 1,
            n_query: 6,
            g: 8,
            k: 1,
            ode: OdeConfig::default(),
            seed: 0,
            augment: Augment::FlipCrop,
            backbone: BackboneConfig::default(),
            dynamic_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("lr0 and weight_decay must be non-negative, momentum in [0, 1)"));
        }
        if self.n_way < 2 || self.k_shot < 1 || self.n_query < 1 {
            return Err(invalid!("need N >= 2, K >= 1 and Q >= 1"));
        }
        self.ode.validate()
    }

    pub fn model_config(&self, global_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            filter: FilterShape::new(self.g, self.k),
            dynamic_sampling: self.dynamic_sampling,
            ode: self.ode.clone(),
            global_classes,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// Derives an independent stream seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

/// SGD state: optional momentum buffers.
struct Sgd {
    weight_decay: f64,
    momentum: f64,
    velocity: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// `p <- p - lr * v - lr * wd * p` with `v = momentum * v + grad`.
    fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        let (wd, mu) = (self.weight_decay, self.momentum);
        let velocity = &mut self.velocity;
        model.params.update(|name, p, g| {
            let v = velocity.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
            v.iter_mut().zip(g).for_each(|(v, g)| *v = mu * *v + g);
            p.iter().zip(v.iter()).map(|(p, v)| p - lr * v - lr * wd * p).collect()
        })
    }
}

/// Builds the stacked input of a freshly sampled episode.
pub fn episode_input<R: rand::Rng>(
    dataset: &Dataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    augment: Augment,
    with_global: bool,
    rng: &mut R,
) -> Result<EpisodeInput> {
    let episode = data::sample_episode(dataset, split, n_way, k_shot, n_query, rng)?;
    let support = data::stack_images(dataset, &episode.support, augment, rng)?;
    let query = data::stack_images(dataset, &episode.query, augment, rng)?;
    EpisodeInput::from_episode(dataset, &episode, support, query, with_global)
}

/// Offsets of the meta-test episode drawn from `episode_seed` with one
/// query per class; pair `q * n_way + n` aligns query `q` with slot `n`.
pub fn episode_offsets(model: &Model, dataset: &Dataset, episode_seed: u64, n_way: usize, k_shot: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let input = episode_input(dataset, Split::MetaTest, n_way, k_shot, 1, Augment::None, false, &mut rng)?;
    model.offsets(&input)
}

/// Trains a fresh model on the meta-train split. One metrics record is
/// passed to `on_epoch` after every epoch.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let model_config = config.model_config(dataset.meta_train.len());
    let mut model = Model::init(model_config, derive_seed(config.seed, u64::MAX))?;
    let mut sgd = Sgd {
        weight_decay: config.weight_decay,
        momentum: config.momentum,
        velocity: Default::default(),
    };
    let total = config.total_steps();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut t = 0;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = cosine_lr(config.lr0, t, total);
        for _ in 0..config.episodes_per_epoch {
            let episode_seed = derive_seed(config.seed, t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let input = episode_input(
                dataset,
                Split::MetaTrain,
                config.n_way,
                config.k_shot,
                config.n_query,
                config.augment,
                true,
                &mut rng,
            )?;
            let tape = Tape::new();
            let out = forward_episode(&tape, &model.config, &model.params, &input)?;
            let loss = out.total_loss.item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    episode_seed,
                    loss,
                });
            }
            let grads = tape.backward(out.total_loss)?;
            model.params.zero_grad();
            model.params.accumulate(&grads.for_params(&model.params))?;
            lr = cosine_lr(config.lr0, t, total);
            sgd.step(&mut model, lr)?;

            loss_sum += loss;
            correct += out.correct(&input.query_slots);
            seen += input.num_queries();
            t += 1;
        }
        let record = EpochMetrics {
            epoch,
            loss: loss_sum / config.episodes_per_epoch.max(1) as f64,
            acc: correct as f64 / seen.max(1) as f64,
            lr,
        };
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { model, metrics })
}

/// `(mean, 1.96 * sample_std / sqrt(n))`.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub accuracies: Vec<f64>,
}

/// Per-episode query accuracy on `split`, in parallel across episodes. Each
/// episode draws from its own seed-derived stream, so results do not depend
/// on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    episodes: usize,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(invalid!("evaluation needs at least one episode"));
    }
    let accuracies = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let input = episode_input(dataset, split, n_way, k_shot, n_query, Augment::None, false, &mut rng)?;
            let tape = Tape::inert();
            let out = forward_episode(&tape, &model.config, &model.params, &input)?;
            Ok(out.correct(&input.query_slots) as f64 / input.num_queries() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean_acc, ci95) = mean_ci95(&accuracies);
    Ok(EvalReport {
        summary: EvalSummary {
            mean_acc,
            ci95,
            episodes,
        },
        accuracies,
    })
}

/// Writes one JSON object per line.
pub fn write_json_line<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}
