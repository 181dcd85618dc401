//! Ablation benchmark: trains several model variants on the same synthetic
//! data and seed and evaluates them on the same meta-test episodes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{self, Dataset, Split, SyntheticSpec};
use crate::error::Result;
use crate::ode::OdeConfig;
use crate::train::{self, EpochMetrics, EvalSummary, TrainConfig};

/// One point on an ablation axis; unset fields keep the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub ode: Option<OdeConfig>,
    #[serde(default)]
    pub g: Option<usize>,
    #[serde(default)]
    pub dynamic_sampling: Option<bool>,
}

impl Variant {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            ode: None,
            g: None,
            dynamic_sampling: None,
        }
    }

    pub fn ode(mut self, ode: OdeConfig) -> Self {
        self.ode = Some(ode);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.g = Some(g);
        self
    }

    pub fn dynamic_sampling(mut self, on: bool) -> Self {
        self.dynamic_sampling = Some(on);
        self
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(ode) = &self.ode {
            c.ode = ode.clone();
        }
        if let Some(g) = self.g {
            c.g = g;
        }
        if let Some(d) = self.dynamic_sampling {
            c.dynamic_sampling = d;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub variants: Vec<Variant>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            eval_episodes: 500,
            eval_seed: 1,
            variants: Vec::new(),
        }
    }
}

impl BenchmarkSpec {
    /// The ablation used for the trend checks: 5-way 1-shot on 20 shape
    /// classes (12 meta-train, 8 meta-test), a `[8, 16, 32]` backbone, 20
    /// epochs of 50 episodes, 500 test episodes.
    ///
    /// Variants: `zero_align` (no alignment), `ode` (dopri5, g = 8, live
    /// offsets), `g1` and `g32` (group count), `static` (regular grid).
    pub fn desk_ablation() -> Self {
        let data = SyntheticSpec {
            num_classes: 20,
            meta_train_classes: 12,
            ..SyntheticSpec::default()
        };
        let train = TrainConfig {
            lr0: 0.02,
            momentum: 0.9,
            epochs: 20,
            episodes_per_epoch: 50,
            g: 8,
            k: 1,
            ode: OdeConfig::default(),
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 32],
                ..BackboneConfig::default()
            },
            ..TrainConfig::default()
        };
        Self {
            data,
            train,
            eval_episodes: 500,
            eval_seed: 1,
            variants: vec![
                Variant::new("zero_align").ode(OdeConfig::euler(0)),
                Variant::new("ode"),
                Variant::new("g1").groups(1),
                Variant::new("g32").groups(32),
                Variant::new("static").dynamic_sampling(false),
            ],
        }
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub eval: EvalSummary,
    pub last_epoch: Option<EpochMetrics>,
    pub train_seconds: f64,
}

/// Trains and evaluates one variant.
pub fn run_variant(spec: &BenchmarkSpec, dataset: &Dataset, variant: &Variant) -> Result<VariantResult> {
    let config = variant.apply(&spec.train);
    let start = Instant::now();
    let outcome = train::train(&config, dataset, |_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let report = train::evaluate(
        &outcome.model,
        dataset,
        Split::MetaTest,
        spec.eval_episodes,
        config.n_way,
        config.k_shot,
        config.n_query,
        spec.eval_seed,
    )?;
    Ok(VariantResult {
        name: variant.name.clone(),
        eval: report.summary,
        last_epoch: outcome.metrics.last().cloned(),
        train_seconds,
    })
}

/// Runs every variant of `spec`, reporting each result as it finishes.
pub fn run(spec: &BenchmarkSpec, mut on_result: impl FnMut(&VariantResult)) -> Result<Vec<VariantResult>> {
    let dataset = data::generate_synthetic(&spec.data)?;
    spec.variants
        .iter()
        .map(|v| {
            let r = run_variant(spec, &dataset, v)?;
            on_result(&r);
            Ok(r)
        })
        .collect()
}

/// `a` beats `b` by at least `margin` accuracy points and by more than the
/// sum of their confidence half-widths.
pub fn beats(a: &EvalSummary, b: &EvalSummary, margin_points: f64) -> bool {
    let gap = a.mean_acc - b.mean_acc;
    gap >= margin_points / 100.0 && gap > a.ci95 + b.ci95
}
