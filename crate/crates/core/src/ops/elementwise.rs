use crate::error::{invalid, shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn check_same_tape(a: Var<'_>, b: Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape(), b.tape()) {
        Ok(())
    } else {
        Err(invalid!("operands live on different tapes"))
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: operand shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + 'static,
) -> Result<Var<'t>> {
    let xv = x.value();
    let yv = xv.map(f);
    let out = yv.clone();
    Ok(x.tape().record(yv, &[x], move || {
        Box::new(move |g: &[f64], _| vec![Some(backward(&xv, &out, g))])
    }))
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: Var<'_>) -> Result<Var<'_>> {
    unary(x, stable_sigmoid, |_, y, g| {
        y.data().iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect()
    })
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: Var<'_>) -> Result<Var<'_>> {
    unary(x, |v| v.max(0.0), |x, _, g| {
        x.data().iter().zip(g).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
    })
}

pub fn scale(x: Var<'_>, alpha: f64) -> Result<Var<'_>> {
    unary(x, move |v| alpha * v, move |_, _, g| g.iter().map(|g| alpha * g).collect())
}

/// `sum_i coeffs[i] * terms[i]` over equally shaped terms.
pub fn lincomb<'t>(terms: &[Var<'t>], coeffs: &[f64]) -> Result<Var<'t>> {
    if terms.is_empty() || terms.len() != coeffs.len() {
        return Err(invalid!("lincomb needs one coefficient per term and at least one term"));
    }
    let first = terms[0].value();
    let mut out = vec![0.0; first.numel()];
    for (t, &c) in terms.iter().zip(coeffs) {
        check_same_tape(terms[0], *t)?;
        let v = t.value();
        check_same_shape("lincomb", &first, &v)?;
        if c != 0.0 {
            out.iter_mut().zip(v.data()).for_each(|(o, x)| *o += c * x);
        }
    }
    let value = Tensor::from_vec(first.shape(), out)?;
    let coeffs = coeffs.to_vec();
    Ok(terms[0].tape().record(value, terms, move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            coeffs
                .iter()
                .zip(needs)
                .map(|(&c, &need)| need.then(|| g.iter().map(|g| c * g).collect()))
                .collect()
        })
    }))
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    lincomb(&[a, b], &[1.0, 1.0])
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    lincomb(&[a, b], &[1.0, -1.0])
}

/// Element-wise product of equally shaped operands.
pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same_tape(a, b)?;
    let (av, bv) = (a.value(), b.value());
    check_same_shape("mul", &av, &bv)?;
    let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
    let value = Tensor::from_vec(av.shape(), out)?;
    Ok(a.tape().record(value, &[a, b], move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let prod = |other: &Tensor| g.iter().zip(other.data()).map(|(g, o)| g * o).collect();
            vec![needs[0].then(|| prod(&bv)), needs[1].then(|| prod(&av))]
        })
    }))
}

pub fn reshape<'t>(x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let value = x.value().reshape(shape)?;
    Ok(x.tape().record(value, &[x], || Box::new(|g: &[f64], _| vec![Some(g.to_vec())])))
}

/// `(outer, channels, inner)` view used by the channel-axis operations.
fn channel_view(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(shape_err!("expected rank >= 2 for a channel operation, got {:?}", t.shape()));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Concatenates along axis 1. All other extents must agree.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(&first) = parts.first() else {
        return Err(invalid!("concat_channels of zero tensors"));
    };
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let (outer, _, inner) = channel_view(&values[0])?;
    let mut channels = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        check_same_tape(first, *p)?;
        let (o, c, i) = channel_view(v)?;
        if o != outer || i != inner || v.rank() != values[0].rank() || v.shape()[2..] != values[0].shape()[2..] {
            return Err(shape_err!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                values[0].shape(),
                v.shape()
            ));
        }
        channels.push(c);
    }
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for s in 0..outer {
        for (v, &c) in values.iter().zip(&channels) {
            out.extend_from_slice(&v.data()[s * c * inner..(s + 1) * c * inner]);
        }
    }
    let mut shape = values[0].shape().to_vec();
    shape[1] = total;
    let value = Tensor::from_vec(&shape, out)?;
    Ok(first.tape().record(value, parts, move || {
        Box::new(move |g: &[f64], needs: &[bool]| {
            let mut grads: Vec<Option<Vec<f64>>> = channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| need.then(|| Vec::with_capacity(outer * c * inner)))
                .collect();
            for s in 0..outer {
                let mut offset = s * total * inner;
                for (grad, &c) in grads.iter_mut().zip(&channels) {
                    if let Some(grad) = grad {
                        grad.extend_from_slice(&g[offset..offset + c * inner]);
                    }
                    offset += c * inner;
                }
            }
            grads
        })
    }))
}

/// Channels `start..start+len` along axis 1.
pub fn narrow_channels(x: Var<'_>, start: usize, len: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let (outer, c, inner) = channel_view(&xv)?;
    if len == 0 || start + len > c {
        return Err(shape_err!("narrow_channels {start}..{} out of range for {c} channels", start + len));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for s in 0..outer {
        out.extend_from_slice(&xv.data()[(s * c + start) * inner..(s * c + start + len) * inner]);
    }
    let mut shape = xv.shape().to_vec();
    shape[1] = len;
    let value = Tensor::from_vec(&shape, out)?;
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| {
            let mut dx = vec![0.0; outer * c * inner];
            for s in 0..outer {
                dx[(s * c + start) * inner..(s * c + start + len) * inner]
                    .copy_from_slice(&g[s * len * inner..(s + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }))
}

/// Sparse linear map over axis 0: output row `r` is
/// `sum_(src, w) in rows[r]  w * x[src]`.
pub fn row_mix<'t>(x: Var<'t>, rows: &[Vec<(usize, f64)>]) -> Result<Var<'t>> {
    let xv = x.value();
    let n = xv.shape()[0];
    if rows.is_empty() {
        return Err(invalid!("row_mix with no output rows"));
    }
    let stride = xv.numel() / n;
    let mut out = vec![0.0; rows.len() * stride];
    for (r, terms) in rows.iter().enumerate() {
        let dst = &mut out[r * stride..(r + 1) * stride];
        for &(src, w) in terms {
            if src >= n {
                return Err(shape_err!("row_mix source row {src} out of range for {n} rows"));
            }
            dst.iter_mut()
                .zip(&xv.data()[src * stride..(src + 1) * stride])
                .for_each(|(d, v)| *d += w * v);
        }
    }
    let mut shape = xv.shape().to_vec();
    shape[0] = rows.len();
    let value = Tensor::from_vec(&shape, out)?;
    let rows = rows.to_vec();
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| {
            let mut dx = vec![0.0; n * stride];
            for (r, terms) in rows.iter().enumerate() {
                let gr = &g[r * stride..(r + 1) * stride];
                for &(src, w) in terms {
                    dx[src * stride..(src + 1) * stride]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, g)| *d += w * g);
                }
            }
            vec![Some(dx)]
        })
    }))
}

/// Rows of `x` in the given order (repeats allowed).
pub fn index_select<'t>(x: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    let rows: Vec<_> = indices.iter().map(|&i| vec![(i, 1.0)]).collect();
    row_mix(x, &rows)
}

/// Mean of each group of rows; one output row per group.
pub fn segment_mean<'t>(x: Var<'t>, groups: &[Vec<usize>]) -> Result<Var<'t>> {
    let mut rows = Vec::with_capacity(groups.len());
    for (slot, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid!("segment {slot} is empty"));
        }
        let w = 1.0 / members.len() as f64;
        rows.push(members.iter().map(|&m| (m, w)).collect());
    }
    row_mix(x, &rows)
}
