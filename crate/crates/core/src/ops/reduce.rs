use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn plane_means(x: &Tensor) -> Result<(Vec<f64>, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let means = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    debug_assert_eq!(n * c, x.numel() / hw);
    Ok((means, hw))
}

fn spread_plane_grad(g: &[f64], hw: usize) -> Vec<f64> {
    let inv = 1.0 / hw as f64;
    g.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect()
}

/// `[n, c, h, w] -> [n, c, 1, 1]` channel means.
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, _, _) = xv.dims4()?;
    let (means, hw) = plane_means(&xv)?;
    let value = Tensor::from_vec(&[n, c, 1, 1], means)?;
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| vec![Some(spread_plane_grad(g, hw))])
    }))
}

/// `[n, c, h, w] -> [n, c]` channel means.
pub fn spatial_mean(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, _, _) = xv.dims4()?;
    let (means, hw) = plane_means(&xv)?;
    let value = Tensor::from_vec(&[n, c], means)?;
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| vec![Some(spread_plane_grad(g, hw))])
    }))
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err!("max_pool2 on {h}x{w} leaves an empty spatial extent"));
    }
    let data = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    let numel = xv.numel();
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| {
            let mut dx = vec![0.0; numel];
            for (&i, &g) in argmax.iter().zip(g) {
                dx[i] += g;
            }
            vec![Some(dx)]
        })
    }))
}

/// Sum of all elements as a one-element tensor.
pub fn sum(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let numel = xv.numel();
    let value = Tensor::scalar(xv.data().iter().sum());
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| vec![Some(vec![g[0]; numel])])
    }))
}

/// Mean of all elements as a one-element tensor.
pub fn mean(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let numel = xv.numel();
    let value = Tensor::scalar(xv.data().iter().sum::<f64>() / numel as f64);
    Ok(x.tape().record(value, &[x], move || {
        Box::new(move |g: &[f64], _| vec![Some(vec![g[0] / numel as f64; numel])])
    }))
}
