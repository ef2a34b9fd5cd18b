//! Attention to Gaussian-kernel reduction.
//!
//! Appending `w_j = sqrt(M - ‖k_j‖²)` to every key (with `M = max_j ‖k_j‖²`)
//! and `0` to every query gives, for all `i, j`,
//!
//! ```text
//! exp(⟨q_i, k_j⟩ / √d) = exp(s_i) · exp(-‖q'_i - k'_j‖² / (2√d)),
//! s_i = (‖q_i‖² + M) / (2√d).
//! ```
//!
//! The augmented points do not depend on the vector being multiplied, so one
//! [`ReducedInstance`] serves every matvec against the same attention matrix.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{dot, GaussianKernel, KernelProblem, Matrix, PointSet, RealVector};

/// Keys, queries and (optionally) values of one attention head.
#[derive(Clone, Debug)]
pub struct AttentionInstance {
    pub queries: PointSet,
    pub keys: PointSet,
    pub values: Option<Matrix>,
}

impl AttentionInstance {
    pub fn new(queries: PointSet, keys: PointSet, values: Option<Matrix>) -> Result<Self> {
        if queries.dim() != keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: keys.dim(),
                found: queries.dim(),
            });
        }
        if let Some(v) = &values {
            if v.rows() != keys.n() {
                return Err(Error::LengthMismatch {
                    expected: keys.n(),
                    found: v.rows(),
                });
            }
        }
        Ok(Self {
            queries,
            keys,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    /// Entry `exp(⟨q_i, k_j⟩ / √d)` of the unnormalized attention matrix.
    pub fn attention_entry(&self, i: usize, j: usize) -> f64 {
        (dot(self.queries.point(i), self.keys.point(j)) / (self.dim() as f64).sqrt()).exp()
    }
}

/// Gaussian kernel problem in dimension `d + 1` with `σ² = √d`, plus the
/// per-row log scale factors.
#[derive(Clone, Debug)]
pub struct ReducedInstance {
    pub problem: KernelProblem,
    pub row_log_scales: Vec<f64>,
    /// `max_j ‖k_j‖²`.
    pub max_key_norm_sq: f64,
}

/// Augments keys and queries so the attention matrix becomes a row-scaled
/// Gaussian kernel matrix.
pub fn reduce_instance(att: &AttentionInstance) -> Result<ReducedInstance> {
    let d = att.dim();
    let sqrt_d = (d as f64).sqrt();
    let key_norms: Vec<f64> = att.keys.iter().map(|k| dot(k, k)).collect();
    let max_key_norm_sq = key_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut keys = Vec::with_capacity(att.keys.n() * (d + 1));
    for (k, norm_sq) in att.keys.iter().zip(&key_norms) {
        keys.extend_from_slice(k);
        // Clamped: rounding can push M - ‖k‖² slightly below zero.
        keys.push((max_key_norm_sq - norm_sq).max(0.0).sqrt());
    }
    let mut queries = Vec::with_capacity(att.queries.n() * (d + 1));
    let mut row_log_scales = Vec::with_capacity(att.queries.n());
    for q in att.queries.iter() {
        queries.extend_from_slice(q);
        queries.push(0.0);
        row_log_scales.push((dot(q, q) + max_key_norm_sq) / (2.0 * sqrt_d));
    }

    let keys = PointSet::new(Matrix::new(att.keys.n(), d + 1, keys)?)?;
    let queries = PointSet::new(Matrix::new(att.queries.n(), d + 1, queries)?)?;
    let kernel = GaussianKernel::new(sqrt_d.sqrt())?;
    Ok(ReducedInstance {
        problem: KernelProblem::new(queries, keys, kernel)?,
        row_log_scales,
        max_key_norm_sq,
    })
}

/// Result of an attention matvec; rows whose scale factor overflowed are
/// reported and hold `±∞`.
#[derive(Clone, Debug)]
pub struct AttentionProduct {
    pub values: Vec<f64>,
    pub overflowed_rows: Vec<usize>,
}

/// `Ax` through a kernel matvec (exact or approximate) on the reduced problem.
pub fn attention_matvec<F>(red: &ReducedInstance, x: &RealVector, matvec: F) -> Result<AttentionProduct>
where
    F: Fn(&KernelProblem, &RealVector) -> Result<RealVector>,
{
    let n = red.problem.n();
    if x.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: x.len(),
        });
    }
    if x.is_zero() {
        return Ok(AttentionProduct {
            values: vec![0.0; red.problem.rows()],
            overflowed_rows: Vec::new(),
        });
    }
    let kx = matvec(&red.problem, x)?;
    let mut overflowed_rows = Vec::new();
    let values = kx
        .as_slice()
        .iter()
        .zip(&red.row_log_scales)
        .enumerate()
        .map(|(i, (&v, &log_scale))| {
            if log_scale.exp().is_infinite() {
                overflowed_rows.push(i);
                return if v < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
            }
            if v == 0.0 {
                return 0.0;
            }
            let out = v.signum() * (log_scale + v.abs().ln()).exp();
            if out.is_infinite() {
                overflowed_rows.push(i);
            }
            out
        })
        .collect();
    Ok(AttentionProduct {
        values,
        overflowed_rows,
    })
}

/// Normalized attention `D⁻¹AV` with per-row failure flags.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `n × d_v`; rows listed in `failed_rows` are NaN.
    pub output: Matrix,
    /// Rows whose estimated row sum was not positive.
    pub failed_rows: Vec<usize>,
}

/// Computes `D⁻¹AV` as `diag(K'1)⁻¹ K'V`; the row scale factors cancel, so no
/// large exponentials are formed. Rows with a non-positive row-sum estimate
/// are flagged rather than divided.
pub fn normalized_attention_flagged<F>(
    red: &ReducedInstance,
    values: &Matrix,
    matvec: F,
) -> Result<AttentionOutput>
where
    F: Fn(&KernelProblem, &RealVector) -> Result<RealVector> + Sync,
{
    let n = red.problem.n();
    if values.rows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: values.rows(),
        });
    }
    let rows = red.problem.rows();
    let ones = RealVector::new(vec![1.0; n])?;
    let denominators = matvec(&red.problem, &ones)?;
    let numerators: Vec<RealVector> = (0..values.cols())
        .into_par_iter()
        .map(|c| matvec(&red.problem, &RealVector::new(values.column(c))?))
        .collect::<Result<_>>()?;

    let mut output = Matrix::zeros(rows, values.cols());
    let mut failed_rows = Vec::new();
    for i in 0..rows {
        let den = denominators[i];
        if den <= 0.0 {
            failed_rows.push(i);
            output.row_mut(i).fill(f64::NAN);
            continue;
        }
        for (c, num) in numerators.iter().enumerate() {
            output.set(i, c, num[i] / den);
        }
    }
    Ok(AttentionOutput {
        output,
        failed_rows,
    })
}

/// [`normalized_attention_flagged`], failing if any row sum is non-positive.
pub fn normalized_attention<F>(red: &ReducedInstance, values: &Matrix, matvec: F) -> Result<Matrix>
where
    F: Fn(&KernelProblem, &RealVector) -> Result<RealVector> + Sync,
{
    let out = normalized_attention_flagged(red, values, matvec)?;
    if out.failed_rows.is_empty() {
        Ok(out.output)
    } else {
        Err(Error::EstimatorFailure {
            rows: out.failed_rows,
        })
    }
}

/// Dense softmax attention `D⁻¹AV`, computed with a per-row max shift.
pub fn softmax_attention_oracle(att: &AttentionInstance, values: &Matrix) -> Matrix {
    let n = att.keys.n();
    let sqrt_d = (att.dim() as f64).sqrt();
    let mut out = Matrix::zeros(att.queries.n(), values.cols());
    for i in 0..att.queries.n() {
        let logits: Vec<f64> = (0..n)
            .map(|j| dot(att.queries.point(i), att.keys.point(j)) / sqrt_d)
            .collect();
        let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
        let total: f64 = weights.iter().sum();
        for c in 0..values.cols() {
            let acc: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * values.get(j, c))
                .sum();
            out.set(i, c, acc / total);
        }
    }
    out
}
