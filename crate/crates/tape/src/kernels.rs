use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `out (+)= op(a) · op(b)` on row-major buffers, where `op` optionally
/// transposes. Shapes are the stored (untransposed) shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let a = ArrayView2::from_shape(a_shape, a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape(b_shape, b).expect("gemm rhs shape");
    let a = if trans_a { a.t() } else { a };
    let b = if trans_b { b.t() } else { b };
    let (m, n) = (a.nrows(), b.ncols());
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b, if accumulate { 1.0 } else { 0.0 }, &mut c);
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place tempered softmax of one slice; returns nothing, `row` holds
/// probabilities afterwards.
pub(crate) fn softmax_slice(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Max of the row and `ln Σ exp(x - max)`, the latter via `ln_1p` so a tail
/// below epsilon is not lost.
fn shifted_lse(row: &[f64]) -> (f64, f64) {
    let Some((top, &max)) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return (f64::NEG_INFINITY, 0.0);
    };
    if !max.is_finite() {
        return (max, 0.0);
    }
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max, rest.ln_1p())
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let (max, tail) = shifted_lse(row);
    max + tail
}

/// In-place `log softmax`; shifting before subtracting keeps tiny log
/// probabilities of the top entry.
pub(crate) fn log_softmax_slice(row: &mut [f64]) {
    let (max, tail) = shifted_lse(row);
    row.iter_mut().for_each(|v| *v = (*v - max) - tail);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_entry_keeps_a_tail_below_epsilon() {
        let mut row = [54.0, -36.0];
        log_softmax_slice(&mut row);
        assert!((row[0] + (-90f64).exp()).abs() < 1e-50, "{}", row[0]);
        assert_eq!(row[1], -90.0);
        assert_eq!(logsumexp_slice(&[1.0, 1.0]), 1.0 + 2f64.ln());
        assert_eq!(logsumexp_slice(&[]), f64::NEG_INFINITY);
        assert!(logsumexp_slice(&[f64::NAN, 1.0]).is_nan());
    }
}
