//! Parameter-free meta-classifier, global classifier head and the joint
//! objective.

use crate::error::{invalid, shape_err, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const GLOBAL_WEIGHT: &str = "global.weight";
pub const GLOBAL_BIAS: &str = "global.bias";
pub const GLOBAL_LOSS_WEIGHT: f64 = 0.5;

pub fn init_global_head<R: rand::Rng>(
    params: &mut ParamStore,
    channels: usize,
    classes: usize,
    rng: &mut R,
) -> Result<()> {
    params.init_uniform(GLOBAL_WEIGHT, &[classes, channels], channels, rng)?;
    params.init_uniform(GLOBAL_BIAS, &[classes], channels, rng)
}

/// `score[b, 0, i, j] = sum_c weights[b, c] * features[b, c, i, j]` for
/// `weights: [n, c, 1, 1]` and `features: [n, c, h, w]`.
pub fn channel_dot<'t>(weights: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let (wv, fv) = (weights.value(), features.value());
    let (n, c, h, w) = fv.dims4()?;
    if wv.shape() != [n, c, 1, 1] {
        return Err(shape_err!("classifier weights {:?} do not fit features {:?}", wv.shape(), fv.shape()));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for b in 0..n {
        let o = &mut out[b * hw..][..hw];
        for ch in 0..c {
            let s = wv.data()[b * c + ch];
            o.iter_mut()
                .zip(&fv.data()[(b * c + ch) * hw..][..hw])
                .for_each(|(o, x)| *o += s * x);
        }
    }
    let value = Tensor::from_vec(&[n, 1, h, w], out)?;
    Ok(weights.tape().record(value, &[weights, features], move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let dw = needs[0].then(|| {
                let mut dw = vec![0.0; n * c];
                for b in 0..n {
                    let gp = &g[b * hw..][..hw];
                    for ch in 0..c {
                        let fp = &fv.data()[(b * c + ch) * hw..][..hw];
                        dw[b * c + ch] = gp.iter().zip(fp).map(|(a, b)| a * b).sum();
                    }
                }
                dw
            });
            let df = needs[1].then(|| {
                let mut df = vec![0.0; n * c * hw];
                for b in 0..n {
                    let gp = &g[b * hw..][..hw];
                    for ch in 0..c {
                        let s = wv.data()[b * c + ch];
                        df[(b * c + ch) * hw..][..hw]
                            .iter_mut()
                            .zip(gp)
                            .for_each(|(d, g)| *d = s * g);
                    }
                }
                df
            });
            vec![dw, df]
        })
    }))
}

/// Per-position similarity map of each aligned query against its prototype:
/// the prototype's channel means act as the weights of a 1x1 convolution.
/// Both inputs are `[n, c, h, w]`; the result is `[n, 1, h, w]`.
pub fn meta_classify<'t>(prototype: Var<'t>, aligned_query: Var<'t>) -> Result<Var<'t>> {
    if prototype.shape() != aligned_query.shape() {
        return Err(shape_err!(
            "prototype {:?} and query {:?} shapes differ",
            prototype.shape(),
            aligned_query.shape()
        ));
    }
    channel_dot(ops::global_avg_pool(prototype)?, aligned_query)
}

/// Score maps of a set of queries against all `N` episode classes,
/// `[queries, N, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeScores<'t> {
    pub maps: Var<'t>,
}

impl<'t> EpisodeScores<'t> {
    pub fn new(maps: Var<'t>) -> Result<Self> {
        let s = maps.shape();
        if s.len() != 4 || s[1] < 1 {
            return Err(shape_err!("episode scores must be [queries, N, h, w], got {s:?}"));
        }
        Ok(Self { maps })
    }

    pub fn n_way(&self) -> usize {
        self.maps.shape()[1]
    }

    /// Spatial mean of every map, one row of `N` logits per query.
    pub fn pooled_logits(&self) -> Vec<Vec<f64>> {
        let v = self.maps.value();
        let s = v.shape();
        let (n_way, hw) = (s[1], s[2] * s[3]);
        v.data()
            .chunks_exact(n_way * hw)
            .map(|q| q.chunks_exact(hw).map(|m| m.iter().sum::<f64>() / hw as f64).collect())
            .collect()
    }

    /// Predicted class per query.
    pub fn predictions(&self) -> Vec<usize> {
        self.pooled_logits().iter().map(|l| predict(l)).collect()
    }
}

/// Per-position `N`-way cross-entropy averaged over positions and queries.
pub fn fewshot_loss<'t>(scores: EpisodeScores<'t>, true_class: &[usize]) -> Result<Var<'t>> {
    if scores.n_way() < 2 {
        return Err(invalid!("few-shot loss needs at least two class maps"));
    }
    ops::nll(ops::log_softmax(scores.maps)?, true_class)
}

/// Cross-entropy of the global classifier on globally pooled aligned queries.
pub fn global_loss<'t>(aligned_query: Var<'t>, labels: &[usize], params: &ParamStore) -> Result<Var<'t>> {
    let tape = aligned_query.tape();
    let w = tape.param(GLOBAL_WEIGHT, params)?;
    let b = tape.param(GLOBAL_BIAS, params)?;
    let logits = ops::dense(ops::spatial_mean(aligned_query)?, w, b)?;
    ops::nll(ops::log_softmax(logits)?, labels)
}

/// `loss_f + 0.5 * loss_g`.
pub fn total_loss<'t>(fewshot: Var<'t>, global: Var<'t>) -> Result<Var<'t>> {
    ops::lincomb(&[fewshot, global], &[1.0, GLOBAL_LOSS_WEIGHT])
}

/// Arg-max with ties resolved to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
