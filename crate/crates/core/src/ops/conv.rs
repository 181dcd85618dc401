use crate::error::{invalid, shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::gemm;

/// Geometry of a 2-D sliding window over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Writes the `[C*kh*kw, oh*ow]` patch matrix of one sample into `col`.
    pub fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds `col` into `dx`.
    pub fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            if ix >= 0 && ix < self.width as isize {
                                line[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding.
///
/// `input` is `[n, c_in, h, w]`, `weight` is `[c_out, c_in/groups, kh, kw]`
/// and `bias`, when present, is `[c_out]`.
pub fn conv2d<'t>(
    input: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Var<'t>> {
    let x = input.value();
    let w = weight.value();
    let (n, c_in, h, wd) = x.dims4()?;
    let (c_out, c_in_g, kh, kw) = w.dims4().map_err(|_| {
        shape_err!("conv2d weight must be [c_out, c_in/groups, kh, kw], got {:?}", w.shape())
    })?;
    if groups == 0 || stride == 0 {
        return Err(invalid!("conv2d needs groups >= 1 and stride >= 1"));
    }
    if c_in % groups != 0 {
        return Err(shape_err!("input channels c_in={c_in} not divisible by groups={groups}"));
    }
    if c_out % groups != 0 {
        return Err(shape_err!("output channels c_out={c_out} not divisible by groups={groups}"));
    }
    if c_in / groups != c_in_g {
        return Err(shape_err!(
            "weight input-channel extent is {c_in_g}, expected c_in/groups = {}",
            c_in / groups
        ));
    }
    if h + 2 * padding < kh {
        return Err(shape_err!("kernel height {kh} exceeds padded input height {}", h + 2 * padding));
    }
    if wd + 2 * padding < kw {
        return Err(shape_err!("kernel width {kw} exceeds padded input width {}", wd + 2 * padding));
    }
    let b = match bias {
        Some(b) => {
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(shape_err!("bias must be [{c_out}], got {:?}", bv.shape()));
            }
            Some(bv)
        }
        None => None,
    };
    let win = Window {
        channels: c_in_g,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        padding,
    };
    let (oh, ow) = (win.out_h(), win.out_w());
    let (k, l) = (win.rows(), win.cols());
    let c_out_g = c_out / groups;
    let in_group = c_in_g * h * wd;
    let out_group = c_out_g * l;

    // a 1x1 unstrided window is its own patch matrix
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let mut out = vec![0.0; n * c_out * l];
    let mut col = vec![0.0; if pointwise { 0 } else { k * l }];
    for s in 0..n {
        for g in 0..groups {
            let xs = &x.data()[(s * c_in + g * c_in_g) * h * wd..][..in_group];
            let patches = if pointwise {
                xs
            } else {
                win.im2col(xs, &mut col);
                &col
            };
            let wg = &w.data()[g * c_out_g * k..(g + 1) * c_out_g * k];
            let os = &mut out[(s * c_out + g * c_out_g) * l..][..out_group];
            gemm(c_out_g, k, l, wg, (k, 1), patches, (l, 1), os, 0.0);
        }
        if let Some(bv) = &b {
            for (oc, &bias) in bv.data().iter().enumerate() {
                out[(s * c_out + oc) * l..][..l].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c_out, oh, ow], out)?;

    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let tape = input.tape();
    Ok(tape.record(value, &parents, move || {
        Box::new(move |gout: &[f64], needs: &[bool]| {
            let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
            let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
            let scratch = if pointwise { 0 } else { k * l };
            let mut col = vec![0.0; scratch];
            let mut dcol = vec![0.0; scratch];
            for s in 0..n {
                for g in 0..groups {
                    let go = &gout[(s * c_out + g * c_out_g) * l..][..out_group];
                    if let Some(dw) = dw.as_mut() {
                        let xs = &x.data()[(s * c_in + g * c_in_g) * h * wd..][..in_group];
                        let patches = if pointwise {
                            xs
                        } else {
                            win.im2col(xs, &mut col);
                            &col
                        };
                        let dwg = &mut dw[g * c_out_g * k..(g + 1) * c_out_g * k];
                        gemm(c_out_g, l, k, go, (l, 1), patches, (1, l), dwg, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wg = &w.data()[g * c_out_g * k..(g + 1) * c_out_g * k];
                        let dxs = &mut dx[(s * c_in + g * c_in_g) * h * wd..][..in_group];
                        if pointwise {
                            gemm(k, c_out_g, l, wg, (1, k), go, (l, 1), dxs, 0.0);
                        } else {
                            gemm(k, c_out_g, l, wg, (1, k), go, (l, 1), &mut dcol, 0.0);
                            win.col2im(&dcol, dxs);
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for s in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            *d += gout[(s * c_out + oc) * l..][..l].iter().sum::<f64>();
                        }
                    }
                    db
                }));
            }
            grads
        })
    }))
}

/// Extracts the `k x k` zero-padded neighbourhood of every position:
/// `[n, c, h, w] -> [n, c*k*k, h, w]`, channel-major then row-major over the
/// patch.
pub fn unfold(input: Var<'_>, k: usize) -> Result<Var<'_>> {
    if k.is_multiple_of(2) {
        return Err(invalid!("unfold kernel size must be odd, got {k}"));
    }
    let x = input.value();
    let (n, c, h, w) = x.dims4()?;
    let win = Window {
        channels: c,
        height: h,
        width: w,
        kh: k,
        kw: k,
        stride: 1,
        padding: (k - 1) / 2,
    };
    let per_in = c * h * w;
    let per_out = win.rows() * win.cols();
    let mut out = vec![0.0; n * per_out];
    for s in 0..n {
        win.im2col(&x.data()[s * per_in..][..per_in], &mut out[s * per_out..][..per_out]);
    }
    let value = Tensor::from_vec(&[n, c * k * k, h, w], out)?;
    Ok(input.tape().record(value, &[input], move || {
        Box::new(move |gout: &[f64], _| {
            let mut dx = vec![0.0; n * per_in];
            for s in 0..n {
                win.col2im(&gout[s * per_out..][..per_out], &mut dx[s * per_in..][..per_in]);
            }
            vec![Some(dx)]
        })
    }))
}
