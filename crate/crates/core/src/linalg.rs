//! Small dense symmetric linear algebra: Cholesky factorization, log-determinants
//! and SPD inverses.

use crate::error::{C2eError, Result};
use crate::tensor::Tensor;

/// Relative jitter scale applied to `trace(m) / dim` by [`default_jitter`].
pub const DEFAULT_JITTER_SCALE: f64 = 1e-6;

/// `1e-6 · trace(m) / dim`, floored at zero.
pub fn default_jitter(m: &Tensor) -> f64 {
    jitter_for(m, DEFAULT_JITTER_SCALE)
}

pub fn jitter_for(m: &Tensor, scale: f64) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    let trace: f64 = (0..n).map(|i| m.at(i, i)).sum();
    (scale * trace / n as f64).max(0.0)
}

fn square_dim(m: &Tensor) -> Result<usize> {
    let (r, c) = m.dims2()?;
    if r != c {
        return Err(C2eError::dim("square matrix", m.shape(), &[c, r]));
    }
    Ok(r)
}

/// `(m + mᵀ)/2 + jitter·I`, elementwise symmetric so `m` and `mᵀ` give identical bits.
pub fn symmetrize_jitter(m: &Tensor, jitter: f64) -> Result<Vec<f64>> {
    let n = square_dim(m)?;
    let d = m.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (d[i * n + j] + d[j * n + i]);
        }
        out[i * n + i] += jitter;
    }
    Ok(out)
}

/// In-place lower Cholesky factor of an `n×n` row-major matrix.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(C2eError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let n = square_dim(m)?;
    let mut a = m.data().to_vec();
    cholesky_in_place(&mut a, n)?;
    Tensor::new(&[n, n], a)
}

/// `2·Σ ln(diag(L))` for `sym(m) + jitter·I = L·Lᵀ`.
pub fn cholesky_logdet(m: &Tensor, jitter: f64) -> Result<f64> {
    if jitter < 0.0 {
        return Err(C2eError::Config(format!("jitter must be >= 0, got {jitter}")));
    }
    let n = square_dim(m)?;
    let mut a = symmetrize_jitter(m, jitter)?;
    cholesky_in_place(&mut a, n)?;
    Ok(2.0 * (0..n).map(|i| a[i * n + i].ln()).sum::<f64>())
}

/// Inverse of an SPD matrix given its lower Cholesky factor.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// Inverse of `sym(m) + jitter·I`, together with its log-determinant.
pub fn spd_inverse_logdet(m: &Tensor, jitter: f64) -> Result<(Tensor, f64)> {
    let n = square_dim(m)?;
    let mut a = symmetrize_jitter(m, jitter)?;
    cholesky_in_place(&mut a, n)?;
    let logdet = 2.0 * (0..n).map(|i| a[i * n + i].ln()).sum::<f64>();
    Ok((Tensor::new(&[n, n], cholesky_inverse(&a, n))?, logdet))
}

pub fn spd_inverse(m: &Tensor, jitter: f64) -> Result<Tensor> {
    spd_inverse_logdet(m, jitter).map(|(inv, _)| inv)
}

/// `mᵀ·m` for a rank-2 tensor.
pub fn gram(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    let mut out = vec![0.0; c * c];
    crate::tensor::matmul_tn_into(m.data(), m.data(), &mut out, r, c, c);
    Tensor::new(&[c, c], out)
}
