//! Dynamic meta-filters: per-position, per-group weights generated from the
//! sampled support neighbourhood and applied to the query feature as a
//! grouped dynamic convolution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::sampler::{self, Neighborhood, OffsetField, POINTS};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const PSI_WEIGHT: &str = "psi.weight";
pub const PSI_BIAS: &str = "psi.bias";

/// Group count `g` and dynamic kernel size `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterShape {
    pub groups: usize,
    pub kernel: usize,
}

impl FilterShape {
    pub fn new(groups: usize, kernel: usize) -> Self {
        Self { groups, kernel }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(invalid!("groups g={} must divide the channel count c={channels}", self.groups));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("dynamic kernel size k={} must be odd", self.kernel));
        }
        Ok(())
    }

    /// Output channels of the filter generator, `g * k * k`.
    pub fn filter_channels(&self) -> usize {
        self.groups * self.kernel * self.kernel
    }
}

/// Filter weights `[n, g*k*k, h, w]`, all in `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct MetaFilter<'t> {
    pub weights: Var<'t>,
    pub shape: FilterShape,
}

/// Generator parameters: one 3x3 kernel over the sampled patch per output.
pub fn init_psi<R: rand::Rng>(
    params: &mut ParamStore,
    channels: usize,
    shape: FilterShape,
    rng: &mut R,
) -> Result<()> {
    shape.validate(channels)?;
    let fan_in = channels * POINTS;
    let out = shape.filter_channels();
    params.init_uniform(PSI_WEIGHT, &[out, channels, 3, 3], fan_in, rng)?;
    params.init_uniform(PSI_BIAS, &[out], fan_in, rng)
}

/// `sigmoid(psi * patch)` at every position. The 3x3 generator kernel is
/// applied to the 3x3 sampled patch with no padding, which reduces to a dense
/// map over the `c * 9` sampled values.
pub fn generate_filter<'t>(
    neighborhood: Neighborhood<'t>,
    shape: FilterShape,
    params: &ParamStore,
) -> Result<MetaFilter<'t>> {
    let patches = neighborhood.patches;
    let pshape = patches.shape();
    if pshape.len() != 4 || !pshape[1].is_multiple_of(POINTS) {
        return Err(shape_err!("neighbourhood must be [n, c*9, h, w], got {pshape:?}"));
    }
    let c = pshape[1] / POINTS;
    shape.validate(c)?;
    let tape = patches.tape();
    let w = tape.param(PSI_WEIGHT, params)?;
    let b = tape.param(PSI_BIAS, params)?;
    let wshape = w.shape();
    if wshape != [shape.filter_channels(), c, 3, 3] {
        return Err(shape_err!(
            "psi weight is {wshape:?}, expected [{}, {c}, 3, 3]",
            shape.filter_channels()
        ));
    }
    let dense_w = ops::reshape(w, &[shape.filter_channels(), c * POINTS, 1, 1])?;
    let raw = ops::conv2d(patches, dense_w, Some(b), 1, 0, 1)?;
    Ok(MetaFilter {
        weights: ops::sigmoid(raw)?,
        shape,
    })
}

/// [`generate_filter`] of `bilinear_gather(support[rows[i]], field[i])` for
/// every pair `i`, without materialising the sampled neighbourhoods.
pub fn generate_filter_deformable<'t>(
    support: Var<'t>,
    rows: &[usize],
    field: OffsetField<'t>,
    shape: FilterShape,
    params: &ParamStore,
) -> Result<MetaFilter<'t>> {
    let c = support.shape().get(1).copied().unwrap_or(0);
    shape.validate(c)?;
    let tape = support.tape();
    let w = tape.param(PSI_WEIGHT, params)?;
    let b = tape.param(PSI_BIAS, params)?;
    if w.shape() != [shape.filter_channels(), c, 3, 3] {
        return Err(shape_err!(
            "psi weight is {:?}, expected [{}, {c}, 3, 3]",
            w.shape(),
            shape.filter_channels()
        ));
    }
    let raw = sampler::deformable_project(support, rows, field, w, b)?;
    Ok(MetaFilter {
        weights: ops::sigmoid(raw)?,
        shape,
    })
}

/// The alignment increment: each channel at `(i, j)` is filtered by its
/// group's `k x k` dynamic kernel over the zero-padded query neighbourhood.
/// Groups are contiguous blocks of `c / g` channels.
pub fn grouped_dynamic_conv<'t>(query: Var<'t>, filter: MetaFilter<'t>) -> Result<Var<'t>> {
    let qv = query.value();
    let fv = filter.weights.value();
    let (n, c, h, w) = qv.dims4()?;
    let (fshape, k) = (filter.shape, filter.shape.kernel);
    fshape.validate(c)?;
    if fv.shape() != [n, fshape.filter_channels(), h, w] {
        return Err(shape_err!(
            "filter {:?} does not fit query {:?} with g={}, k={k}",
            fv.shape(),
            qv.shape(),
            fshape.groups
        ));
    }
    let (g, hw, kk) = (fshape.groups, h * w, k * k);
    let per_group = c / g;
    let r = (k / 2) as isize;
    let (qd, fd) = (qv.data(), fv.data());

    let mut out = vec![0.0; qv.numel()];
    for b in 0..n {
        for ch in 0..c {
            let grp = ch / per_group;
            let qplane = &qd[(b * c + ch) * hw..][..hw];
            let oplane = &mut out[(b * c + ch) * hw..][..hw];
            for t in 0..kk {
                let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                let fplane = &fd[(b * g * kk + grp * kk + t) * hw..][..hw];
                for_each_shifted(h, w, dy, dx, |pos, src| oplane[pos] += fplane[pos] * qplane[src]);
            }
        }
    }
    let value = Tensor::from_vec(qv.shape(), out)?;
    Ok(query.tape().record(value, &[query, filter.weights], move || {
        Box::new(move |gout: &[f64], needs: &[bool]| {
            let (qd, fd) = (qv.data(), fv.data());
            let mut dq = needs[0].then(|| vec![0.0; qv.numel()]);
            let mut df = needs[1].then(|| vec![0.0; fv.numel()]);
            for b in 0..n {
                for ch in 0..c {
                    let grp = ch / per_group;
                    let gplane = &gout[(b * c + ch) * hw..][..hw];
                    for t in 0..kk {
                        let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                        let fbase = (b * g * kk + grp * kk + t) * hw;
                        let qbase = (b * c + ch) * hw;
                        if let Some(dq) = dq.as_mut() {
                            let fplane = &fd[fbase..][..hw];
                            let dqp = &mut dq[qbase..][..hw];
                            for_each_shifted(h, w, dy, dx, |pos, src| dqp[src] += fplane[pos] * gplane[pos]);
                        }
                        if let Some(df) = df.as_mut() {
                            let qplane = &qd[qbase..][..hw];
                            let dfp = &mut df[fbase..][..hw];
                            for_each_shifted(h, w, dy, dx, |pos, src| dfp[pos] += qplane[src] * gplane[pos]);
                        }
                    }
                }
            }
            vec![dq, df]
        })
    }))
}

/// Calls `f(pos, src)` for every in-bounds pair where `src` is `pos` shifted
/// by `(dy, dx)`.
#[inline]
fn for_each_shifted(h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(usize, usize)) {
    let (h, w) = (h as isize, w as isize);
    let (i_lo, i_hi) = ((-dy).max(0), (h - dy).min(h));
    let (j_lo, j_hi) = ((-dx).max(0), (w - dx).min(w));
    for i in i_lo..i_hi {
        for j in j_lo..j_hi {
            f((i * w + j) as usize, ((i + dy) * w + j + dx) as usize);
        }
    }
}

/// One residual alignment step `X + F(X)` with the filter generated from
/// `support` and the offsets predicted for the `(support, query)` pair.
pub fn align_once<'t>(
    support: Var<'t>,
    query: Var<'t>,
    shape: FilterShape,
    params: &ParamStore,
) -> Result<Var<'t>> {
    let filter = filter_for_pair(support, query, shape, params)?;
    ops::add(query, grouped_dynamic_conv(query, filter)?)
}

/// predict_offsets, bilinear_gather and generate_filter for one pair.
pub fn filter_for_pair<'t>(
    support: Var<'t>,
    query: Var<'t>,
    shape: FilterShape,
    params: &ParamStore,
) -> Result<MetaFilter<'t>> {
    let field = sampler::predict_offsets(support, query, params)?;
    let neighborhood = sampler::bilinear_gather(support, field)?;
    generate_filter(neighborhood, shape, params)
}
