use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::gemm;

/// Affine map `x W^T + b` for `x: [n, d]`, `W: [m, d]`, `b: [m]`.
pub fn dense<'t>(input: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (x, w, b) = (input.value(), weight.value(), bias.value());
    let (&[n, d], &[m, wd]) = (x.shape(), w.shape()) else {
        return Err(shape_err!(
            "dense expects [n, d] input and [m, d] weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    };
    if d != wd {
        return Err(shape_err!("dense inner dimension: input has d={d}, weight has d={wd}"));
    }
    if b.shape() != [m] {
        return Err(shape_err!("dense bias must be [{m}], got {:?}", b.shape()));
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    gemm(n, d, m, x.data(), (d, 1), w.data(), (1, d), &mut out, 1.0);
    let value = Tensor::from_vec(&[n, m], out)?;
    Ok(input.tape().record(value, &[input, weight, bias], move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; n * d];
                gemm(n, m, d, g, (m, 1), w.data(), (d, 1), &mut dx, 0.0);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; m * d];
                gemm(m, n, d, g, (1, m), x.data(), (d, 1), &mut dw, 0.0);
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            });
            vec![dx, dw, db]
        })
    }))
}

fn axis1_view(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(shape_err!("expected rank >= 2, got {:?}", t.shape()));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Log-softmax over axis 1, stabilised by subtracting the per-slice maximum.
/// Works for `[n, m]` logits and for `[n, m, h, w]` maps (one softmax per
/// position).
pub fn log_softmax(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (outer, m, inner) = axis1_view(&xv)?;
    let data = xv.data();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * m + k) * inner + i;
            let max = (0..m).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..m).map(|k| (data[idx(k)] - max).exp()).sum::<f64>().ln();
            for k in 0..m {
                out[idx(k)] = data[idx(k)] - lse;
            }
        }
    }
    let value = Tensor::from_vec(xv.shape(), out.clone())?;
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| {
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * m + k) * inner + i;
                    let gsum: f64 = (0..m).map(|k| g[idx(k)]).sum();
                    for k in 0..m {
                        dx[idx(k)] = g[idx(k)] - out[idx(k)].exp() * gsum;
                    }
                }
            }
            vec![Some(dx)]
        })
    }))
}

/// Negative log-likelihood `-mean_{n, pos} logp[n, target[n], pos]` over
/// log-probabilities with classes on axis 1.
pub fn nll<'t>(logp: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let lv = logp.value();
    let (outer, m, inner) = axis1_view(&lv)?;
    if targets.len() != outer {
        return Err(shape_err!("nll: {} targets for {outer} rows", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(crate::error::invalid!("nll: target class {t} out of range for {m} classes"));
    }
    let count = (outer * inner) as f64;
    let mut total = 0.0;
    for (o, &t) in targets.iter().enumerate() {
        total += lv.data()[(o * m + t) * inner..][..inner].iter().sum::<f64>();
    }
    let value = Tensor::scalar(-total / count);
    let targets = targets.to_vec();
    let numel = lv.numel();
    Ok(logp.tape().record(value, &[logp], move || {
        Box::new(move |g: &[f64], _| {
            let mut dx = vec![0.0; numel];
            for (o, &t) in targets.iter().enumerate() {
                dx[(o * m + t) * inner..][..inner].fill(-g[0] / count);
            }
            vec![Some(dx)]
        })
    }))
}
