//! Plain slice kernels shared by eager tensor methods and graph ops.

use crate::scalar::Scalar;

/// `out = a[m×k] · b[k×n]`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    out.fill(F::zero());
    matmul_acc(a, b, out, m, k, n);
}

/// `out += a[m×k] · b[k×n]`.
///
/// Accumulates each output element over `t = 0..k` in order, so results
/// do not depend on the blocking below.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let mut i = 0;
    while i + 2 <= m {
        row_block::<F, 2>(a, b, out, i, k, n);
        i += 2;
    }
    if i < m {
        row_block::<F, 1>(a, b, out, i, k, n);
    }
}

const TILE: usize = 8;

/// `R` output rows, `TILE` columns at a time held in local accumulators.
#[inline(always)]
fn row_block<F: Scalar, const R: usize>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    i: usize,
    k: usize,
    n: usize,
) {
    let mut j = 0;
    while j + TILE <= n {
        let mut acc = [[F::zero(); TILE]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE]);
        }
        for t in 0..k {
            let bv: &[F; TILE] = b[t * n + j..t * n + j + TILE].try_into().expect("tile");
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + t];
                for w in 0..TILE {
                    row[w] = row[w] + av * bv[w];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * n + j..(i + r) * n + j + TILE].copy_from_slice(row);
        }
        j += TILE;
    }
    for r in 0..R {
        let arow = &a[(i + r) * k..(i + r + 1) * k];
        for jj in j..n {
            let mut acc = out[(i + r) * n + jj];
            for (t, &av) in arow.iter().enumerate() {
                acc = acc + av * b[t * n + jj];
            }
            out[(i + r) * n + jj] = acc;
        }
    }
}

/// `out += aᵀ · c` with `a[m×k]`, `c[m×n]`, `out[k×n]`.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], c: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o = *o + av * cv;
            }
        }
    }
}

/// `out += c · bᵀ` with `c[m×n]`, `b[k×n]`, `out[m×k]`.
pub fn matmul_nt_acc<F: Scalar>(c: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(c, &bt, out, m, n, k);
}

pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn softmax_rows<F: Scalar>(x: &[F], out: &mut [F], cols: usize) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Normalizes each last-axis slice; writes the normalized values and
/// per-row inverse standard deviations for reuse in the backward pass.
pub fn layer_norm_rows<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
    xhat: &mut [F],
    inv_std: &mut [F],
) {
    let d = gain.len();
    let n = F::from_usize_lossy(d);
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        let base = r * d;
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat[base + j] = h;
            out[base + j] = gain[j] * h + bias[j];
        }
    }
}

fn gelu_consts<F: Scalar>() -> (F, F) {
    (
        F::lit((2.0 / std::f64::consts::PI).sqrt()),
        F::lit(0.044715),
    )
}

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(&a, &b, &mut c, 2, 3, 4);
        // aᵀ·c has shape 3x4; compare with explicit transpose route
        let at = transpose(&a, 2, 3);
        let mut want = vec![0.0; 12];
        matmul(&at, &c, &mut want, 3, 2, 4);
        let mut got = vec![0.0; 12];
        matmul_tn_acc(&a, &c, &mut got, 2, 3, 4);
        assert_eq!(got, want);

        let mut got = vec![0.0; 6];
        matmul_nt_acc(&c, &b, &mut got, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let mut want = vec![0.0; 6];
        matmul(&c, &bt, &mut want, 2, 4, 3);
        assert_eq!(got, want);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let h = 1e-6;
        for &x in &[-3.0f64, -0.4, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(softplus(100.0f64), 100.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
