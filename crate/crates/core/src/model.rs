//! The full few-shot model: backbone, dynamic alignment, meta-classifier and
//! global head, evaluated one episode at a time.
//!
//! All `(query, class)` pairs of an episode are processed as one batch; pair
//! `p = q * N + n` aligns query `q` against the prototype of slot `n`. The
//! adaptive solver therefore shares its step sequence across the pairs of an
//! episode.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::data::{Dataset, Episode};
use crate::error::{invalid, Result};
use crate::heads::{self, EpisodeScores};
use crate::metafilter::{self, FilterShape, MetaFilter};
use crate::ode::{self, FilterRefresh, OdeConfig, OdeMethod, SolveStats};
use crate::ops;
use crate::params::ParamStore;
use crate::sampler::{self, OffsetField, OffsetTerms};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub filter: FilterShape,
    /// Learned offsets; when false the regular 3x3 grid is used.
    pub dynamic_sampling: bool,
    pub ode: OdeConfig,
    /// Size of the global classifier (number of meta-train classes).
    pub global_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.aligns() {
            self.filter.validate(self.backbone.feature_channels())?;
            self.ode.validate()?;
        }
        if self.global_classes == 0 {
            return Err(invalid!("global classifier needs at least one class"));
        }
        Ok(())
    }

    /// False for the "no alignment" configuration (`euler_fixed`, depth 0).
    pub fn aligns(&self) -> bool {
        !self.ode.is_identity()
    }

    /// Fresh parameters. The offset predictor starts at zero, so every
    /// model begins from regular-grid sampling.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = self.backbone.feature_channels();
        self.backbone.init_params(&mut params, &mut rng)?;
        heads::init_global_head(&mut params, c, self.global_classes, &mut rng)?;
        if self.aligns() {
            metafilter::init_psi(&mut params, c, self.filter, &mut rng)?;
            if self.dynamic_sampling {
                sampler::init_eta(&mut params, c)?;
            }
        }
        Ok(params)
    }
}

/// Configuration plus parameters; the unit saved as a checkpoint.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params.save_dir(dir, serde_json::to_value(&self.config)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (params, config) = ParamStore::load_dir(dir)?;
        let config: ModelConfig = serde_json::from_value(config)?;
        config.validate()?;
        Ok(Self { config, params })
    }

    /// Initial offsets of every `(query, class)` pair of an episode,
    /// `[pairs, 18, h, w]`; all zero without dynamic sampling.
    pub fn offsets(&self, input: &EpisodeInput) -> Result<Tensor> {
        let tape = Tape::inert();
        let out = forward_episode(&tape, &self.config, &self.params, input)?;
        match out.offsets {
            Some(o) => Ok(o.value()),
            None => {
                let s = out.aligned.shape();
                Tensor::zeros(&[s[0], sampler::OFFSET_CHANNELS, s[2], s[3]])
            }
        }
    }
}

/// Stacked images and labels of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeInput {
    pub n_way: usize,
    /// `[N*K, c, s, s]`.
    pub support: Tensor,
    pub support_slots: Vec<usize>,
    /// `[N*Q, c, s, s]`.
    pub query: Tensor,
    pub query_slots: Vec<usize>,
    /// Global labels of the queries; present for meta-train episodes.
    pub query_global: Option<Vec<usize>>,
}

impl EpisodeInput {
    pub fn from_episode(
        dataset: &Dataset,
        episode: &Episode,
        support: Tensor,
        query: Tensor,
        with_global: bool,
    ) -> Result<Self> {
        let query_global = if with_global {
            let labels = episode
                .query
                .iter()
                .map(|q| {
                    dataset
                        .global_label(q.class_id)
                        .ok_or_else(|| invalid!("class {} has no global label", q.class_id))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        } else {
            None
        };
        Ok(Self {
            n_way: episode.n_way,
            support,
            support_slots: episode.support.iter().map(|s| s.slot).collect(),
            query,
            query_slots: episode.query.iter().map(|q| q.slot).collect(),
            query_global,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_slots.len()
    }
}

pub struct EpisodeOutput<'t> {
    pub scores: EpisodeScores<'t>,
    /// Aligned query features, one row per pair.
    pub aligned: Var<'t>,
    /// Initial offsets per pair, when dynamic sampling is active.
    pub offsets: Option<Var<'t>>,
    pub fewshot_loss: Var<'t>,
    pub global_loss: Option<Var<'t>>,
    pub total_loss: Var<'t>,
    pub solve_stats: SolveStats,
    /// Accepted step sizes of the alignment solve.
    pub steps: Vec<f64>,
}

impl EpisodeOutput<'_> {
    pub fn correct(&self, query_slots: &[usize]) -> usize {
        self.scores
            .predictions()
            .iter()
            .zip(query_slots)
            .filter(|(p, t)| p == t)
            .count()
    }
}

struct PairIndex {
    proto: Vec<usize>,
    query: Vec<usize>,
}

impl PairIndex {
    fn new(queries: usize, n_way: usize) -> Self {
        Self {
            proto: (0..queries).flat_map(|_| 0..n_way).collect(),
            query: (0..queries).flat_map(|q| std::iter::repeat_n(q, n_way)).collect(),
        }
    }
}

/// Meta-filters for every pair, computed from the initial query features.
fn pair_filters<'t>(
    config: &ModelConfig,
    params: &ParamStore,
    protos: Var<'t>,
    queries: Var<'t>,
    pairs: &PairIndex,
) -> Result<(MetaFilter<'t>, Option<Var<'t>>)> {
    if config.dynamic_sampling {
        // the offset conv is linear in the concatenated pair, so each
        // prototype and each query is convolved once
        let a = OffsetTerms::support_term(protos, params)?;
        let b = OffsetTerms::query_term(queries, params)?;
        let offsets = ops::add(ops::index_select(a, &pairs.proto)?, ops::index_select(b, &pairs.query)?)?;
        let field = OffsetField::new(offsets)?;
        let filter = metafilter::generate_filter_deformable(protos, &pairs.proto, field, config.filter, params)?;
        Ok((filter, Some(offsets)))
    } else {
        // the regular grid does not depend on the query: one filter per class
        let neighborhood = sampler::Neighborhood {
            patches: ops::unfold(protos, 3)?,
        };
        let per_class = metafilter::generate_filter(neighborhood, config.filter, params)?;
        let weights = ops::index_select(per_class.weights, &pairs.proto)?;
        Ok((
            MetaFilter {
                weights,
                shape: config.filter,
            },
            None,
        ))
    }
}

/// Forward pass of one episode on `tape`.
pub fn forward_episode<'t>(
    tape: &'t Tape,
    config: &ModelConfig,
    params: &ParamStore,
    input: &EpisodeInput,
) -> Result<EpisodeOutput<'t>> {
    forward_impl(tape, config, params, input, None)
}

/// Like [`forward_episode`], but a `dopri5` alignment takes the given step
/// sequence instead of choosing steps adaptively.
pub fn forward_episode_replay<'t>(
    tape: &'t Tape,
    config: &ModelConfig,
    params: &ParamStore,
    input: &EpisodeInput,
    steps: &[f64],
) -> Result<EpisodeOutput<'t>> {
    forward_impl(tape, config, params, input, Some(steps))
}

fn forward_impl<'t>(
    tape: &'t Tape,
    config: &ModelConfig,
    params: &ParamStore,
    input: &EpisodeInput,
    replay: Option<&[f64]>,
) -> Result<EpisodeOutput<'t>> {
    let n_way = input.n_way;
    let n_support = input.support_slots.len();
    let n_queries = input.num_queries();
    if n_way < 2 {
        return Err(invalid!("episodes need at least two classes"));
    }
    if input.support.shape()[0] != n_support || input.query.shape()[0] != n_queries {
        return Err(invalid!("episode image counts do not match the slot lists"));
    }
    let images = Tensor::concat_batch(&[&input.support, &input.query])?;
    let feats = backbone::embed(tape.constant(images), &config.backbone, params)?;

    let groups: Vec<Vec<usize>> = (0..n_way)
        .map(|slot| (0..n_support).filter(|&i| input.support_slots[i] == slot).collect())
        .collect();
    let protos = ops::segment_mean(feats, &groups)?;
    let query_rows: Vec<usize> = (n_support..n_support + n_queries).collect();
    let queries = ops::index_select(feats, &query_rows)?;
    let pairs = PairIndex::new(n_queries, n_way);
    let x0 = ops::index_select(queries, &pairs.query)?;

    let (aligned, offsets, solve_stats, steps) = if config.aligns() {
        let (filter, offsets) = pair_filters(config, params, protos, queries, &pairs)?;
        let live_refresh = config.ode.filter_refresh == FilterRefresh::PerEval && config.dynamic_sampling;
        let support_pairs = ops::index_select(protos, &pairs.proto)?;
        let field = |x: Var<'t>| -> Result<Var<'t>> {
            if live_refresh {
                let f = metafilter::filter_for_pair(support_pairs, x, config.filter, params)?;
                metafilter::grouped_dynamic_conv(x, f)
            } else {
                metafilter::grouped_dynamic_conv(x, filter)
            }
        };
        let sol = match (config.ode.method, replay) {
            (OdeMethod::EulerFixed, _) => ode::euler(x0, field, config.ode.depth_t, 1.0)?,
            (OdeMethod::Dopri5, None) => ode::dopri5(x0, field, &config.ode)?,
            (OdeMethod::Dopri5, Some(steps)) => ode::dopri5_replay(x0, field, steps, config.ode.max_evals)?,
        };
        (sol.state, offsets, sol.stats, sol.steps)
    } else {
        (x0, None, SolveStats::default(), Vec::new())
    };

    let class_weights = ops::index_select(ops::global_avg_pool(protos)?, &pairs.proto)?;
    let maps = heads::channel_dot(class_weights, aligned)?;
    let (h, w) = (maps.shape()[2], maps.shape()[3]);
    let scores = EpisodeScores::new(ops::reshape(maps, &[n_queries, n_way, h, w])?)?;
    let fewshot_loss = heads::fewshot_loss(scores, &input.query_slots)?;

    let (global_loss, total_loss) = match &input.query_global {
        Some(labels) => {
            let true_rows: Vec<usize> = (0..n_queries).map(|q| q * n_way + input.query_slots[q]).collect();
            let lg = heads::global_loss(ops::index_select(aligned, &true_rows)?, labels, params)?;
            (Some(lg), heads::total_loss(fewshot_loss, lg)?)
        }
        None => (None, fewshot_loss),
    };
    Ok(EpisodeOutput {
        scores,
        aligned,
        offsets,
        fewshot_loss,
        global_loss,
        total_loss,
        solve_stats,
        steps,
    })
}
