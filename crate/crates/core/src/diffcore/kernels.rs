//! Slice-level numeric kernels shared by graph ops and the loss functions.

/// `c = beta * c + op(a) * op(b)` for row-major buffers.
///
/// `op(a)` is `m x k`: stored as `m x k` when `a_t` is false, else as `k x m`.
/// `op(b)` is `k x n`: stored as `k x n` when `b_t` is false, else as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three buffers, whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Writes `log_softmax(row)` into `out`, returning the log-sum-exp.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
    lse
}

/// Softmax over the first `len` entries; the remainder are set to zero.
pub(crate) fn softmax_prefix(row: &[f64], len: usize, out: &mut [f64]) {
    let max = row[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out[..len].iter_mut().zip(&row[..len]) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out[..len].iter_mut() {
        *o *= inv;
    }
    for o in out[len..].iter_mut() {
        *o = 0.0;
    }
}

/// Row-wise `sum_v p_s(v) * (log p_s(v) - log p_t(v))`, averaged over rows.
pub(crate) fn kl_rows(student: &[f64], teacher: &[f64], cols: usize) -> f64 {
    let rows = student.len() / cols;
    let mut ls = vec![0.0; cols];
    let mut lt = vec![0.0; cols];
    let mut total = 0.0;
    for r in 0..rows {
        log_softmax_row(&student[r * cols..(r + 1) * cols], &mut ls);
        log_softmax_row(&teacher[r * cols..(r + 1) * cols], &mut lt);
        let mut kl = 0.0;
        for (a, b) in ls.iter().zip(&lt) {
            kl += a.exp() * (a - b);
        }
        total += kl;
    }
    total / rows as f64
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub(crate) fn cross_entropy_rows(logits: &[f64], targets: &[usize], cols: usize) -> f64 {
    let mut buf = vec![0.0; cols];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        log_softmax_row(&logits[r * cols..(r + 1) * cols], &mut buf);
        total -= buf[t];
    }
    total / targets.len() as f64
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        total += d * d;
    }
    total / a.len() as f64
}
