//! Dynamic neighbourhood sampling.
//!
//! An offset field moves each of the nine points of the regular 3x3 grid
//! around every position; the support feature is then read at the moved
//! points with bilinear interpolation. Offsets are in feature-grid pixels and
//! shared by all channels.

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Canonical 3x3 grid, row-major over `(dy, dx)`. Point `p` owns offset
/// channels `2p` (vertical) and `2p + 1` (horizontal).
pub const GRID: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub const POINTS: usize = 9;
pub const OFFSET_CHANNELS: usize = 2 * POINTS;
pub const OFFSET_KERNEL: usize = 5;

pub const ETA_WEIGHT: &str = "eta.weight";
pub const ETA_BIAS: &str = "eta.bias";

/// Per-position `(dy, dx)` offsets for the nine grid points, `[n, 18, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField<'t> {
    pub offsets: Var<'t>,
}

/// Sampled support values, `[n, c*9, h, w]`, point index fastest.
#[derive(Clone, Copy, Debug)]
pub struct Neighborhood<'t> {
    pub patches: Var<'t>,
}

impl<'t> OffsetField<'t> {
    pub fn new(offsets: Var<'t>) -> Result<Self> {
        let shape = offsets.shape();
        if shape.len() != 4 || shape[1] != OFFSET_CHANNELS {
            return Err(shape_err!("offset field must be [n, 18, h, w], got {shape:?}"));
        }
        Ok(Self { offsets })
    }

    /// All-zero offsets, i.e. the regular grid.
    pub fn zeros(tape: &'t crate::tape::Tape, n: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(tape.constant(Tensor::zeros(&[n, OFFSET_CHANNELS, h, w])?))
    }
}

/// Zero-initialised offset predictor (5x5 conv over the concatenated pair).
pub fn init_eta(params: &mut ParamStore, channels: usize) -> Result<()> {
    params.init_zeros(ETA_WEIGHT, &[OFFSET_CHANNELS, 2 * channels, OFFSET_KERNEL, OFFSET_KERNEL])?;
    params.init_zeros(ETA_BIAS, &[OFFSET_CHANNELS])
}

/// Offsets from the channel concatenation of `support` and `query`.
pub fn predict_offsets<'t>(
    support: Var<'t>,
    query: Var<'t>,
    params: &ParamStore,
) -> Result<OffsetField<'t>> {
    if support.shape() != query.shape() {
        return Err(shape_err!(
            "support {:?} and query {:?} feature shapes differ",
            support.shape(),
            query.shape()
        ));
    }
    let tape = support.tape();
    let pair = ops::concat_channels(&[support, query])?;
    let w = tape.param(ETA_WEIGHT, params)?;
    let b = tape.param(ETA_BIAS, params)?;
    OffsetField::new(ops::conv2d(pair, w, Some(b), 1, OFFSET_KERNEL / 2, 1)?)
}

/// The two halves of the offset predictor applied separately. Because the
/// predictor is a single convolution, `support_term(s) + query_term(q)`
/// equals `predict_offsets(s, q)`; a batch of pairs can therefore reuse one
/// term per distinct support and per distinct query.
pub struct OffsetTerms;

impl OffsetTerms {
    pub fn support_term<'t>(support: Var<'t>, params: &ParamStore) -> Result<Var<'t>> {
        let c = support.shape()[1];
        let tape = support.tape();
        let w = ops::narrow_channels(tape.param(ETA_WEIGHT, params)?, 0, c)?;
        let b = tape.param(ETA_BIAS, params)?;
        ops::conv2d(support, w, Some(b), 1, OFFSET_KERNEL / 2, 1)
    }

    pub fn query_term<'t>(query: Var<'t>, params: &ParamStore) -> Result<Var<'t>> {
        let c = query.shape()[1];
        let w = ops::narrow_channels(query.tape().param(ETA_WEIGHT, params)?, c, c)?;
        ops::conv2d(query, w, None, 1, OFFSET_KERNEL / 2, 1)
    }
}

/// Bilinear corner weights of a fractional coordinate. Corners outside the
/// `h x w` map are marked with `OUTSIDE`.
#[derive(Clone, Copy)]
struct Corners {
    idx: [u32; 4],
    w: [f64; 4],
    /// Fractional parts of the coordinate.
    ly: f64,
    lx: f64,
}

const OUTSIDE: u32 = u32::MAX;

impl Corners {
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        // far-off coordinates stay outside but cannot overflow the corner sums
        let (y0, x0) = (y0.clamp(-2.0, h as f64 + 1.0) as i64, x0.clamp(-2.0, w as f64 + 1.0) as i64);
        let at = |yy: i64, xx: i64| {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                (yy as usize * w + xx as usize) as u32
            } else {
                OUTSIDE
            }
        };
        Self {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            w: [hy * hx, hy * lx, ly * hx, ly * lx],
            ly,
            lx,
        }
    }

    /// d(weight)/dy for each corner.
    fn dy(&self) -> [f64; 4] {
        let hx = 1.0 - self.lx;
        [-hx, -self.lx, hx, self.lx]
    }

    /// d(weight)/dx for each corner.
    fn dx(&self) -> [f64; 4] {
        let hy = 1.0 - self.ly;
        [-hy, hy, -self.ly, self.ly]
    }

    /// Interpolated value of `plane`.
    fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for q in 0..4 {
            if self.idx[q] != OUTSIDE {
                v += self.w[q] * plane[self.idx[q] as usize];
            }
        }
        v
    }

    /// `(d sample / dy, d sample / dx)` of `plane`.
    fn slope(&self, plane: &[f64]) -> (f64, f64) {
        let (dy, dx) = (self.dy(), self.dx());
        let (mut gy, mut gx) = (0.0, 0.0);
        for q in 0..4 {
            if self.idx[q] != OUTSIDE {
                let v = plane[self.idx[q] as usize];
                gy += dy[q] * v;
                gx += dx[q] * v;
            }
        }
        (gy, gx)
    }

    /// Adds `scale` times the corner weights into `plane`.
    fn scatter(&self, plane: &mut [f64], scale: f64) {
        for q in 0..4 {
            if self.idx[q] != OUTSIDE {
                plane[self.idx[q] as usize] += self.w[q] * scale;
            }
        }
    }
}

/// Reads `feature` at the grid points moved by `field`.
pub fn bilinear_gather<'t>(feature: Var<'t>, field: OffsetField<'t>) -> Result<Neighborhood<'t>> {
    let fv = feature.value();
    let ov = field.offsets.value();
    let (n, c, h, w) = fv.dims4()?;
    let (on, _, oh, ow) = ov.dims4()?;
    if on != n || oh != h || ow != w {
        return Err(shape_err!(
            "offset field {:?} does not match feature {:?}",
            ov.shape(),
            fv.shape()
        ));
    }
    if !ov.all_finite() {
        return Err(Error::NonFinite("offset field contains NaN or infinity".into()));
    }
    let hw = h * w;
    let corners = corner_table(&ov, n, h, w);
    let fd = fv.data();
    let mut out = vec![0.0; n * c * POINTS * hw];
    for b in 0..n {
        let table = &corners[b * POINTS * hw..][..POINTS * hw];
        for ch in 0..c {
            let plane = &fd[(b * c + ch) * hw..][..hw];
            let dst = &mut out[(b * c + ch) * POINTS * hw..][..POINTS * hw];
            for (d, cr) in dst.iter_mut().zip(table) {
                *d = cr.sample(plane);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c * POINTS, h, w], out)?;
    let tape = feature.tape();
    let patches = tape.record(value, &[feature, field.offsets], move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let mut dfeat = needs[0].then(|| vec![0.0; fv.numel()]);
            let mut doff = needs[1].then(|| vec![0.0; ov.numel()]);
            let fd = fv.data();
            // per (b, p, pos) offset gradients, scattered into the field layout below
            let mut gyx = vec![[0.0f64; 2]; n * POINTS * hw];
            for b in 0..n {
                let table = &corners[b * POINTS * hw..][..POINTS * hw];
                let acc = &mut gyx[b * POINTS * hw..][..POINTS * hw];
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let plane = &fd[base..][..hw];
                    let go = &g[base * POINTS..][..POINTS * hw];
                    for ((cr, &go), a) in table.iter().zip(go).zip(acc.iter_mut()) {
                        if go == 0.0 {
                            continue;
                        }
                        if let Some(df) = dfeat.as_mut() {
                            cr.scatter(&mut df[base..][..hw], go);
                        }
                        let (gy, gx) = cr.slope(plane);
                        a[0] += gy * go;
                        a[1] += gx * go;
                    }
                }
            }
            if let Some(d) = doff.as_mut() {
                for b in 0..n {
                    for p in 0..POINTS {
                        for pos in 0..hw {
                            let [gy, gx] = gyx[(b * POINTS + p) * hw + pos];
                            d[(b * OFFSET_CHANNELS + 2 * p) * hw + pos] = gy;
                            d[(b * OFFSET_CHANNELS + 2 * p + 1) * hw + pos] = gx;
                        }
                    }
                }
            }
            vec![dfeat, doff]
        })
    });
    Ok(Neighborhood { patches })
}

/// `weight` applied to deformably sampled neighbourhoods: for pair `i`,
/// equivalent to a `1x1` convolution of
/// `bilinear_gather(feature[rows[i]], field[i])` with `weight` reshaped to
/// `[o, c*9, 1, 1]`, plus `bias`.
///
/// Each feature row is projected through `weight` once, and the projections
/// (`o * 9` planes instead of `c * 9`) are interpolated per pair.
/// `feature: [s, c, h, w]`, `field: [rows.len(), 18, h, w]`,
/// `weight: [o, c, 3, 3]`, `bias: [o]`; the result is `[rows.len(), o, h, w]`.
pub fn deformable_project<'t>(
    feature: Var<'t>,
    rows: &[usize],
    field: OffsetField<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<Var<'t>> {
    let fv = feature.value();
    let ov = field.offsets.value();
    let wv = weight.value();
    let bv = bias.value();
    let (s, c, h, w) = fv.dims4()?;
    let (o, wc, kh, kw) = wv.dims4()?;
    let pairs = rows.len();
    if wc != c || kh != 3 || kw != 3 {
        return Err(shape_err!("weight {:?} does not fit {c} sampled channels", wv.shape()));
    }
    if bv.shape() != [o] {
        return Err(shape_err!("bias must be [{o}], got {:?}", bv.shape()));
    }
    if ov.shape() != [pairs, OFFSET_CHANNELS, h, w] {
        return Err(shape_err!(
            "offset field {:?} does not match {pairs} pairs of {:?}",
            ov.shape(),
            fv.shape()
        ));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= s) {
        return Err(shape_err!("feature row {r} out of range for {s} rows"));
    }
    if !ov.all_finite() {
        return Err(Error::NonFinite("offset field contains NaN or infinity".into()));
    }
    let hw = h * w;
    let plane_block = POINTS * hw;
    // proj[b, oo, p, :] = sum_ch weight[oo, ch, p] * feature[b, ch, :]
    let mut proj = vec![0.0; s * o * plane_block];
    for b in 0..s {
        let fb = &fv.data()[b * c * hw..][..c * hw];
        for oo in 0..o {
            let wo = &wv.data()[oo * c * POINTS..][..c * POINTS];
            let dst = &mut proj[(b * o + oo) * plane_block..][..plane_block];
            ops::gemm(POINTS, c, hw, wo, (1, POINTS), fb, (hw, 1), dst, 0.0);
        }
    }
    let corners = corner_table(&ov, pairs, h, w);
    let mut out = vec![0.0; pairs * o * hw];
    for (pr, &src) in rows.iter().enumerate() {
        let table = &corners[pr * plane_block..][..plane_block];
        for oo in 0..o {
            let dst = &mut out[(pr * o + oo) * hw..][..hw];
            dst.fill(bv.data()[oo]);
            let pb = &proj[(src * o + oo) * plane_block..][..plane_block];
            for p in 0..POINTS {
                let plane = &pb[p * hw..][..hw];
                for (d, cr) in dst.iter_mut().zip(&table[p * hw..][..hw]) {
                    *d += cr.sample(plane);
                }
            }
        }
    }
    let value = Tensor::from_vec(&[pairs, o, h, w], out)?;
    let rows = rows.to_vec();
    let tape = feature.tape();
    Ok(tape.record(value, &[feature, field.offsets, weight, bias], move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let need_proj = needs[0] || needs[2];
            let mut dproj = need_proj.then(|| vec![0.0; proj.len()]);
            let mut doff = needs[1].then(|| vec![0.0; ov.numel()]);
            for (pr, &src) in rows.iter().enumerate() {
                let table = &corners[pr * plane_block..][..plane_block];
                for oo in 0..o {
                    let go = &g[(pr * o + oo) * hw..][..hw];
                    let block = (src * o + oo) * plane_block;
                    for p in 0..POINTS {
                        let cells = &table[p * hw..][..hw];
                        if let Some(dp) = dproj.as_mut() {
                            let plane = &mut dp[block + p * hw..][..hw];
                            for (cr, &gv) in cells.iter().zip(go) {
                                cr.scatter(plane, gv);
                            }
                        }
                        if let Some(d) = doff.as_mut() {
                            let plane = &proj[block + p * hw..][..hw];
                            let base = pr * OFFSET_CHANNELS * hw;
                            for (pos, (cr, &gv)) in cells.iter().zip(go).enumerate() {
                                let (gy, gx) = cr.slope(plane);
                                d[base + 2 * p * hw + pos] += gy * gv;
                                d[base + (2 * p + 1) * hw + pos] += gx * gv;
                            }
                        }
                    }
                }
            }
            let mut dfeat = needs[0].then(|| vec![0.0; fv.numel()]);
            let mut dweight = needs[2].then(|| vec![0.0; wv.numel()]);
            if let Some(dp) = &dproj {
                let mut tmp = vec![0.0; POINTS * c];
                for b in 0..s {
                    let fb = &fv.data()[b * c * hw..][..c * hw];
                    for oo in 0..o {
                        let dpb = &dp[(b * o + oo) * plane_block..][..plane_block];
                        if let Some(dw) = dweight.as_mut() {
                            // tmp[p, ch] = sum_pix dproj[p, pix] * feature[ch, pix]
                            ops::gemm(POINTS, hw, c, dpb, (hw, 1), fb, (1, hw), &mut tmp, 0.0);
                            let dwo = &mut dw[oo * c * POINTS..][..c * POINTS];
                            for ch in 0..c {
                                for p in 0..POINTS {
                                    dwo[ch * POINTS + p] += tmp[p * c + ch];
                                }
                            }
                        }
                        if let Some(df) = dfeat.as_mut() {
                            let wo = &wv.data()[oo * c * POINTS..][..c * POINTS];
                            let dfb = &mut df[b * c * hw..][..c * hw];
                            ops::gemm(c, POINTS, hw, wo, (POINTS, 1), dpb, (hw, 1), dfb, 1.0);
                        }
                    }
                }
            }
            let dbias = needs[3].then(|| {
                let mut db = vec![0.0; o];
                for pr in 0..pairs {
                    for (oo, d) in db.iter_mut().enumerate() {
                        *d += g[(pr * o + oo) * hw..][..hw].iter().sum::<f64>();
                    }
                }
                db
            });
            vec![dfeat, doff, dweight, dbias]
        })
    }))
}

fn corner_table(offsets: &Tensor, n: usize, h: usize, w: usize) -> Vec<Corners> {
    let hw = h * w;
    let od = offsets.data();
    let mut table = Vec::with_capacity(n * POINTS * hw);
    for b in 0..n {
        for (p, &(gy, gx)) in GRID.iter().enumerate() {
            for pos in 0..hw {
                let (i, j) = (pos / w, pos % w);
                let y = i as f64 + gy as f64 + od[(b * OFFSET_CHANNELS + 2 * p) * hw + pos];
                let x = j as f64 + gx as f64 + od[(b * OFFSET_CHANNELS + 2 * p + 1) * hw + pos];
                table.push(Corners::new(y, x, h, w));
            }
        }
    }
    table
}

/// One line of the offset dump: absolute sampling coordinates of the nine
/// points used for query position `pos`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplingRecord {
    pub pos: [usize; 2],
    pub points: [[f64; 2]; POINTS],
}

/// Absolute sampling coordinates for every position of sample `index`.
pub fn sampling_points(offsets: &Tensor, index: usize) -> Result<Vec<SamplingRecord>> {
    let (n, ch, h, w) = offsets.dims4()?;
    if ch != OFFSET_CHANNELS || index >= n {
        return Err(invalid!("sample {index} not available in offsets {:?}", offsets.shape()));
    }
    let hw = h * w;
    let od = &offsets.data()[index * OFFSET_CHANNELS * hw..][..OFFSET_CHANNELS * hw];
    let mut records = Vec::with_capacity(hw);
    for i in 0..h {
        for j in 0..w {
            let pos = i * w + j;
            let mut points = [[0.0; 2]; POINTS];
            for (p, &(gy, gx)) in GRID.iter().enumerate() {
                points[p] = [
                    i as f64 + gy as f64 + od[2 * p * hw + pos],
                    j as f64 + gx as f64 + od[(2 * p + 1) * hw + pos],
                ];
            }
            records.push(SamplingRecord { pos: [i, j], points });
        }
    }
    Ok(records)
}
