//! Gaussian entropy of token matrices and the entropy-difference compression
//! objective.
//!
//! A layer's tokens `Z ∈ ℝ^{N×C}` are treated as `N` samples of a
//! `C`-dimensional Gaussian. Its differential entropy is
//! `H(Z) = ½ ln|Σ| + (C/2)(1 + ln 2π)` with `Σ` the centered sample covariance.
//! Compression maximizes `−½ ln|Σ_Z|`; the input entropy and the dimension
//! bookkeeping term are constants of the parameters and are never computed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{C2eError, Result};
use crate::linalg::{self, cholesky_logdet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Nats.
    pub entropy: f64,
    /// `ln|Σ + jitter·I|`, nats.
    pub logdet_sigma: f64,
    pub dim: usize,
    pub jitter_used: f64,
}

impl EntropyReport {
    fn from_logdet(logdet_sigma: f64, dim: usize, jitter_used: f64) -> Self {
        EntropyReport {
            entropy: 0.5 * logdet_sigma + gaussian_constant(dim),
            logdet_sigma,
            dim,
            jitter_used,
        }
    }
}

/// `(M/2)(1 + ln 2π)`.
pub fn gaussian_constant(dim: usize) -> f64 {
    0.5 * dim as f64 * (1.0 + (2.0 * PI).ln())
}

fn token_dims(z: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = z.dims2()?;
    if n == 0 {
        return Err(C2eError::EmptyInput("token matrix has no rows"));
    }
    Ok((n, c))
}

/// `(1/N)·z̄ᵀz̄` with per-channel means removed.
pub fn covariance(z: &Tensor) -> Result<Tensor> {
    let (n, c) = token_dims(z)?;
    let centered = center(z, n, c);
    let mut g = linalg::gram(&centered)?;
    g.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    Ok(g)
}

fn center(z: &Tensor, n: usize, c: usize) -> Tensor {
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Tensor::from_fn(&[n, c], |i| z.data()[i] - mean[i % c])
}

/// Differentiable [`covariance`] on a tape.
pub fn covariance_var(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).rows();
    if n == 0 {
        return Err(C2eError::EmptyInput("token matrix has no rows"));
    }
    let mean = tape.mean_rows(z)?;
    let neg = tape.scale(mean, -1.0);
    let zc = tape.add_row(z, neg)?;
    let zt = tape.transpose(zc)?;
    let g = tape.matmul(zt, zc)?;
    Ok(tape.scale(g, 1.0 / n as f64))
}

/// `H = ½ ln|Σ + jitter·I| + (C/2)(1 + ln 2π)`.
pub fn gaussian_entropy(z: &Tensor, jitter: f64) -> Result<EntropyReport> {
    let sigma = covariance(z)?;
    gaussian_entropy_of_covariance(&sigma, jitter)
}

/// [`gaussian_entropy`] with jitter `scale · trace(Σ)/C`.
pub fn gaussian_entropy_auto(z: &Tensor, scale: f64) -> Result<EntropyReport> {
    let sigma = covariance(z)?;
    let jitter = linalg::jitter_for(&sigma, scale);
    gaussian_entropy_of_covariance(&sigma, jitter)
}

pub fn gaussian_entropy_of_covariance(sigma: &Tensor, jitter: f64) -> Result<EntropyReport> {
    let ld = cholesky_logdet(sigma, jitter)?;
    Ok(EntropyReport::from_logdet(ld, sigma.rows(), jitter))
}

/// `−½ ln|Σ_Z + jitter·I|` with the default relative jitter.
pub fn compression_objective(z: &Tensor) -> Result<f64> {
    let sigma = covariance(z)?;
    let jitter = linalg::default_jitter(&sigma);
    Ok(-0.5 * cholesky_logdet(&sigma, jitter)?)
}

pub fn compression_objective_with(z: &Tensor, jitter: f64) -> Result<f64> {
    let sigma = covariance(z)?;
    Ok(-0.5 * cholesky_logdet(&sigma, jitter)?)
}

/// `−z·(zᵀz + jitter·I)⁻¹`, the closed-form gradient of `−½ ln|zᵀz + jitter·I|`.
pub fn exact_entropy_gradient(z: &Tensor, jitter: f64) -> Result<Tensor> {
    token_dims(z)?;
    let inv = linalg::spd_inverse(&linalg::gram(z)?, jitter)?;
    Ok(z.matmul(&inv)?.scale(-1.0))
}

/// Midpoint concavity of `ln|·|` on a pair of SPD matrices.
pub fn concavity_probe(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(C2eError::dim("concavity_probe", a.shape(), b.shape()));
    }
    let mid = a.add(b)?.scale(0.5);
    let lhs = cholesky_logdet(&mid, 0.0)?;
    let rhs = 0.5 * (cholesky_logdet(a, 0.0)? + cholesky_logdet(b, 0.0)?);
    Ok(lhs >= rhs - 1e-9)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitLogdet {
    /// `ln|zᵀz + jitter·I|`.
    pub total: f64,
    /// Sum of the block log-determinants over the partition.
    pub split_sum: f64,
}

fn check_partition(partition: &[Vec<usize>], c: usize) -> Result<()> {
    let mut seen = vec![false; c];
    for block in partition {
        if block.is_empty() {
            return Err(C2eError::Partition("empty block".into()));
        }
        for &i in block {
            if i >= c {
                return Err(C2eError::Partition(format!("channel {i} out of range 0..{c}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(C2eError::Partition(format!("channel {i} appears twice")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(C2eError::Partition(format!("channel {missing} not covered")));
    }
    Ok(())
}

/// Log-determinant of the full Gram against the sum over channel blocks.
///
/// For positive definite Grams the block sum is never smaller than the total
/// (Fischer's inequality); both values are returned so callers can inspect
/// the direction themselves.
pub fn subspace_split_logdet(z: &Tensor, partition: &[Vec<usize>], jitter: f64) -> Result<SplitLogdet> {
    let (_, c) = token_dims(z)?;
    check_partition(partition, c)?;
    split_logdet_of_gram(&linalg::gram(z)?, partition, jitter)
}

pub fn split_logdet_of_gram(gram: &Tensor, partition: &[Vec<usize>], jitter: f64) -> Result<SplitLogdet> {
    check_partition(partition, gram.rows())?;
    let total = cholesky_logdet(gram, jitter)?;
    let mut split_sum = 0.0;
    for block in partition {
        let sub = gram.select_rows(block).select_cols(block);
        split_sum += cholesky_logdet(&sub, jitter)?;
    }
    Ok(SplitLogdet { total, split_sum })
}
