//! Dense row-major kernels. Every reduction runs in a fixed index order so
//! results are bit-reproducible on one thread.

pub(crate) const LN_EPS: f64 = 1e-5;

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&x, b_row) in row.iter().zip(b.chunks_exact(n)) {
            axpy(x, b_row, out_row);
        }
    }
    out
}

/// `acc[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&x, acc_row) in a_row.iter().zip(acc.chunks_exact_mut(n)) {
            axpy(x, g_row, acc_row);
        }
    }
}

/// `g[m,n] · w[k,n]ᵀ`
pub(crate) fn matmul_nt(g: &[f64], w: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (g_row, out_row) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, w_row) in out_row.iter_mut().zip(w.chunks_exact(n)) {
            *o = dot(g_row, w_row);
        }
    }
    out
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn bias_grad_acc(g: &[f64], acc: &mut [f64]) {
    for row in g.chunks_exact(acc.len()) {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
}

/// Layer norm over rows of width `gain.len()`. Returns (output, normalized input, 1/σ per row).
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layer_norm`]; accumulates gain/bias grads, returns dx.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for (r, &s) in rstd.iter().enumerate() {
        let dy_row = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += dy_row[i] * xh[i];
            dbias[i] += dy_row[i];
            dxhat[i] = dy_row[i] * gain[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for i in 0..d {
            dx[r * d + i] = s * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `ln softmax(v)[target]`
pub(crate) fn log_softmax_at(v: &[f64], target: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    v[target] - max - sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let g = [1.0, 1.0, 0.0, 1.0]; // 2x2
        let mut acc = vec![0.0; 6];
        matmul_tn_acc(&a, &g, 2, 3, 2, &mut acc);
        assert_eq!(acc, vec![1.0, 5.0, 2.0, 7.0, 3.0, 9.0]);
        assert_eq!(matmul_nt(&g, &b, 2, 2, 3), vec![1.0, 1.0, 1.5, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let (y, _, _) = layer_norm(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
