//! Differentiable tensor operations.
//!
//! Every function takes and returns [`Var`]s on the same tape, validates
//! shapes up front and records its own backward rule.

mod conv;
mod elementwise;
mod linear;
mod reduce;

pub use conv::{conv2d, unfold};
pub use elementwise::{
    add, concat_channels, index_select, lincomb, mul, narrow_channels, relu, reshape, row_mix,
    scale, segment_mean, sigmoid, sub,
};
pub use linear::{dense, log_softmax, nll};
pub use reduce::{global_avg_pool, max_pool2, mean, spatial_mean, sum};

/// `c = a * b + beta * c` for row-major `c` of shape `[m, n]`, with explicit
/// (row, column) strides for `a` (`[m, k]`) and `b` (`[k, n]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
