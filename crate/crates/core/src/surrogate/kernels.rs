//! Dense kernels on row-major matrices.

use matrixmultiply::dgemm;

const LN_EPS: f64 = 1e-9;

/// `C ← α A B + β C` with explicit row/column strides (m×k times k×n).
#[allow(clippy::too_many_arguments)]
pub(super) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `x wᵀ + b` for `x` of shape rows×inp and `w` of shape out×inp.
pub(super) fn linear(x: &[f64], rows: usize, inp: usize, w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    let beta = match b {
        Some(b) => {
            for r in y.chunks_mut(out) {
                r.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    gemm(rows, inp, out, 1.0, x, inp, 1, w, 1, inp, beta, &mut y, out, 1);
    y
}

/// `dw += dyᵀ x`.
pub(super) fn linear_grad_w(dy: &[f64], rows: usize, out: usize, x: &[f64], inp: usize, dw: &mut [f64]) {
    gemm(out, rows, inp, 1.0, dy, 1, out, x, inp, 1, 1.0, dw, inp, 1);
}

/// `dy w`.
pub(super) fn linear_grad_x(dy: &[f64], rows: usize, out: usize, w: &[f64], inp: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, 1.0, dy, out, 1, w, inp, 1, 0.0, &mut dx, inp, 1);
    dx
}

pub(super) fn softmax_rows(m: &mut [f64], width: usize) {
    for row in m.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Pre-affine normalized rows and their reciprocal standard deviations.
pub fn layer_norm(x: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = x.to_vec();
    let mut rstd = Vec::with_capacity(x.len() / width);
    for row in xhat.chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Adds the input gradient of `g ⊙ xhat + b` into `dx`, and the parameter
/// gradients into `dg`/`db` when present.
#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    width: usize,
    dx: &mut [f64],
    dg: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let (Some(dg), Some(db)) = (dg, db) {
        for (dyr, xr) in dy.chunks(width).zip(xhat.chunks(width)) {
            for j in 0..width {
                dg[j] += dyr[j] * xr[j];
                db[j] += dyr[j];
            }
        }
    }
    let inv = 1.0 / width as f64;
    let mut dxhat = vec![0.0; width];
    for (t, r) in rstd.iter().enumerate() {
        let dyr = &dy[t * width..(t + 1) * width];
        let xr = &xhat[t * width..(t + 1) * width];
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..width {
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xr[j];
        }
        m1 *= inv;
        m2 *= inv;
        for (j, o) in dx[t * width..(t + 1) * width].iter_mut().enumerate() {
            *o += r * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

pub fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}
