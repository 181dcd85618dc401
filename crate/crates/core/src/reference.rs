//! Naive loop implementations of the numeric kernels, written for clarity
//! rather than speed. They share no code with the optimised operations and
//! serve as test oracles.

use crate::error::Result;
use crate::sampler::GRID;
use crate::tensor::Tensor;

/// Zero-padded cross-correlation, seven nested loops.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, cg, kh, kw) = weight.dims4()?;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let out_per_group = c_out / groups;
    assert_eq!(cg * groups, c_in);
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for o in 0..c_out {
            let grp = o / out_per_group;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cg {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as i64 - padding as i64;
                                let x = (j * stride + v) as i64 - padding as i64;
                                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                    continue;
                                }
                                acc += weight.at4(o, ci, u, v)
                                    * input.at4(b, grp * cg + ci, y as usize, x as usize);
                            }
                        }
                    }
                    out[((b * c_out + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c_out, oh, ow], out)
}

/// `k x k` patch around every position, zero outside the map.
pub fn unfold(input: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let r = (k / 2) as i64;
    let kk = k * k;
    let mut out = vec![0.0; n * c * kk * h * w];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for u in 0..k {
                        for v in 0..k {
                            let y = i as i64 + u as i64 - r;
                            let x = j as i64 + v as i64 - r;
                            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                continue;
                            }
                            let row = ch * kk + u * k + v;
                            out[((b * c * kk + row) * h + i) * w + j] = input.at4(b, ch, y as usize, x as usize);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c * kk, h, w], out)
}

/// Bilinear read of one channel at a fractional coordinate, zero outside.
pub fn interpolate(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let pixel = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    pixel(y0, x0) * (1.0 - ty) * (1.0 - tx)
        + pixel(y0, x0 + 1.0) * (1.0 - ty) * tx
        + pixel(y0 + 1.0, x0) * ty * (1.0 - tx)
        + pixel(y0 + 1.0, x0 + 1.0) * ty * tx
}

/// Deformable 3x3 gather, one scalar interpolation per point.
pub fn bilinear_gather(feature: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; n * c * 9 * hw];
    for b in 0..n {
        for ch in 0..c {
            let plane = &feature.data()[(b * c + ch) * hw..][..hw];
            for i in 0..h {
                for j in 0..w {
                    for (p, &(dy, dx)) in GRID.iter().enumerate() {
                        let y = i as f64 + dy as f64 + offsets.at4(b, 2 * p, i, j);
                        let x = j as f64 + dx as f64 + offsets.at4(b, 2 * p + 1, i, j);
                        out[((b * c + ch) * 9 + p) * hw + i * w + j] = interpolate(plane, h, w, y, x);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c * 9, h, w], out)
}

/// `sigmoid(psi . patch + bias)` with explicit dot products over the `c * 9`
/// sampled values of every position.
pub fn generate_filter(neighborhood: &Tensor, psi_weight: &Tensor, psi_bias: &Tensor) -> Result<Tensor> {
    let (n, c9, h, w) = neighborhood.dims4()?;
    let (out_ch, c, _, _) = psi_weight.dims4()?;
    assert_eq!(c * 9, c9);
    let mut out = vec![0.0; n * out_ch * h * w];
    for b in 0..n {
        for o in 0..out_ch {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = psi_bias.data()[o];
                    for ch in 0..c {
                        for p in 0..9 {
                            acc += psi_weight.at4(o, ch, p / 3, p % 3) * neighborhood.at4(b, ch * 9 + p, i, j);
                        }
                    }
                    out[((b * out_ch + o) * h + i) * w + j] = 1.0 / (1.0 + (-acc).exp());
                }
            }
        }
    }
    Tensor::from_vec(&[n, out_ch, h, w], out)
}

/// Grouped per-position dynamic convolution, five nested loops per sample.
pub fn grouped_dynamic_conv(query: &Tensor, filter: &Tensor, groups: usize, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = query.dims4()?;
    let r = (k / 2) as i64;
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let grp = ch * groups / c;
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let y = i as i64 + u as i64 - r;
                            let x = j as i64 + v as i64 - r;
                            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                continue;
                            }
                            acc += filter.at4(b, grp * k * k + u * k + v, i, j)
                                * query.at4(b, ch, y as usize, x as usize);
                        }
                    }
                    out[((b * c + ch) * h + i) * w + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Per-position dot product of the prototype's channel means with the query.
pub fn meta_classify(prototype: &Tensor, query: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = query.dims4()?;
    let mut out = vec![0.0; n * h * w];
    for b in 0..n {
        let means: Vec<f64> = (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += prototype.at4(b, ch, i, j);
                    }
                }
                s / (h * w) as f64
            })
            .collect();
        for i in 0..h {
            for j in 0..w {
                out[(b * h + i) * w + j] = (0..c).map(|ch| means[ch] * query.at4(b, ch, i, j)).sum();
            }
        }
    }
    Tensor::from_vec(&[n, 1, h, w], out)
}

/// Per-channel spatial mean, `[n, c]`.
pub fn spatial_mean(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += input.at4(b, ch, i, j);
                }
            }
            out[b * c + ch] = s / (h * w) as f64;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

/// Element-wise mean of the listed rows of a rank-4 tensor.
pub fn prototype(features: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, c, h, w) = features.dims4()?;
    let per = c * h * w;
    let mut out = vec![0.0; per];
    for &r in rows {
        for (o, v) in out.iter_mut().zip(&features.data()[r * per..][..per]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    Tensor::from_vec(&[1, c, h, w], out)
}

/// `max |a - b| / max(max |b|, 1e-300)`; zero when both are zero.
pub fn relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = actual.iter().zip(expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-300)
    }
}
