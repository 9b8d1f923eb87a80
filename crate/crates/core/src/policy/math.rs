//! Small dense-vector kernels. Fixed accumulation order keeps results
//! identical across runs and worker counts.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// y += a * x
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// y = x W for row-major W[rows=in][cols=out]; y has length `out`.
#[inline]
pub fn matvec(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(&mut y, xi, &w[i * out..(i + 1) * out]);
        }
    }
    y
}

/// dx = W dout for row-major W[in][out]; dx has length `in`.
#[inline]
pub fn matvec_t(dout: &[f64], w: &[f64], inp: usize) -> Vec<f64> {
    let out = dout.len();
    (0..inp).map(|i| dot(&w[i * out..(i + 1) * out], dout)).collect()
}

/// dW += outer(x, dy) for row-major dW[in][out].
#[inline]
pub fn outer_acc(dw: &mut [f64], x: &[f64], dy: &[f64]) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(&mut dw[i * out..(i + 1) * out], xi, dy);
        }
    }
}

/// log(sum(exp(x))) with max-shift.
#[inline]
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

pub const GELU_COEF: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}
