//! Slice-level numeric kernels shared by the tape and the dense operator code.

use crate::error::{Error, Result};

/// `out[m×p] = a[m×k] · b[k×p]` (overwrites `out`).
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    out.fill(0.0);
    matmul_acc(a, b, out, m, k, p);
}

/// `out[m×p] += a[m×k] · b[k×p]`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[l * p..(l + 1) * p]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×p] += aᵀ · b` with `a[m×k]`, `b[m×p]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[l * p..(l + 1) * p].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` with `a[m×p]`, `b[k×p]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for l in 0..k {
            let brow = &b[l * p..(l + 1) * p];
            out[i * k + l] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Compensated (Neumaier) sum; the result is within a few ulps of the
/// exact sum regardless of length.
pub fn accurate_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Householder QR of a square `n×n` matrix with the sign convention
/// `diag(R) >= 0`. Returns `(Q, R)` row-major, or `RankDeficient` when a
/// diagonal entry of `R` falls below `1e-12 · max(1, ‖A‖_F)`.
pub fn qr_square(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let mut r = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut v = vec![0.0; n];
    for j in 0..n {
        let norm = (j..n).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[j * n + j] > 0.0 { -norm } else { norm };
        v.fill(0.0);
        for i in j..n {
            v[i] = r[i * n + j];
        }
        v[j] -= alpha;
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R
        for c in 0..n {
            let dot: f64 = (j..n).map(|i| v[i] * r[i * n + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                r[i * n + c] -= f * v[i];
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for row in 0..n {
            let dot: f64 = (j..n).map(|i| q[row * n + i] * v[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                q[row * n + i] -= f * v[i];
            }
        }
    }
    for j in 0..n {
        for i in (j + 1)..n {
            r[i * n + j] = 0.0;
        }
        if r[j * n + j] < 0.0 {
            for c in 0..n {
                r[j * n + c] = -r[j * n + c];
            }
            for row in 0..n {
                q[row * n + j] = -q[row * n + j];
            }
        }
    }
    if (0..n).any(|j| r[j * n + j] < 1e-12 * scale) {
        return Err(Error::RankDeficient);
    }
    Ok((q, r))
}

/// Gradient of `A` given `dQ` for `A = QR` (square, `diag(R) > 0`, no
/// gradient flowing into `R`):
/// `dA = (dQ + Q·copyltu(M))·R⁻ᵀ` with `M = -dQᵀQ` and
/// `copyltu(M) = tril(M) + tril(M, -1)ᵀ`.
pub fn qr_q_backward(q: &[f64], r: &[f64], dq: &[f64], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    // M = -dQᵀ Q
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += dq[k * n + i] * q[k * n + j];
            }
            m[i * n + j] = -s;
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = if i >= j { m[i * n + j] } else { m[j * n + i] };
        }
    }
    let mut z = dq.to_vec();
    matmul_acc(q, &sym, &mut z, n, n, n);
    // Y = Z R⁻ᵀ  <=>  R Yᵀ = Zᵀ; solve column by column of Yᵀ (rows of Y).
    let mut y = vec![0.0; n * n];
    for row in 0..n {
        for i in (0..n).rev() {
            let mut s = z[row * n + i];
            for k in (i + 1)..n {
                s -= r[i * n + k] * y[row * n + k];
            }
            y[row * n + i] = s / r[i * n + i];
        }
    }
    y
}
