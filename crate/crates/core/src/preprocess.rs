//! Normalization of `x` and the split of its coordinates into huge (`H1`),
//! negligible (`H2`) and tail (`T`) indices.
//!
//! After scaling to `‖x‖² = n`:
//! `H1 = {j : x_j² ≥ n^γ}`, `H2 = {j : x_j² ≤ n^-4}`, `T` = the rest.
//! `H1` columns are multiplied exactly; `H2` is dropped. Since `|x_j| ≤ n^-2`
//! there, the ℓ₂ cost is at most `√n · Σ_{H2} |x_j| ≤ n^-1/2`.

use rayon::prelude::*;

use crate::error::{check_param, Error, Result};
use crate::kernel::{KernelProblem, RealVector};

/// Relative tolerance for the `‖x‖² = n` precondition.
const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct XPartition {
    /// `s` with `‖s·x‖² = n`.
    pub scale: f64,
    pub gamma: f64,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub tail: Vec<usize>,
}

impl XPartition {
    /// `n^{1-γ}`, the Markov bound on `|H1|`.
    pub fn h1_bound(n: usize, gamma: f64) -> f64 {
        (n as f64).powf(1.0 - gamma)
    }
}

/// Scales `x` to squared norm `n`. Returns `(x_scaled, scale)`.
pub fn normalize_x(x: &RealVector) -> Result<(RealVector, f64)> {
    if x.is_empty() {
        return Err(Error::Empty("x"));
    }
    if x.is_zero() {
        return Err(Error::TrivialInput);
    }
    let n = x.len() as f64;
    let norm = x.norm();
    let scale = n.sqrt() / norm;
    let scaled: Vec<f64> = x.as_slice().iter().map(|v| v * scale).collect();
    Ok((RealVector::new(scaled)?, scale))
}

/// Splits coordinates of a normalized `x` by magnitude. Thresholds are
/// closed: `x_j² = n^γ` goes to `H1`, `x_j² = n^-4` goes to `H2`.
pub fn partition_x(x_scaled: &RealVector, gamma: f64) -> Result<XPartition> {
    check_param("gamma", gamma, (0.0..=1.0).contains(&gamma), "must lie in [0, 1]")?;
    let n = x_scaled.len();
    if n == 0 {
        return Err(Error::Empty("x"));
    }
    let nf = n as f64;
    let norm_sq = x_scaled.norm_sq();
    if ((norm_sq - nf) / nf).abs() > NORM_TOL {
        return Err(Error::Precondition(format!(
            "partition needs ‖x‖² = n = {n}, found {norm_sq}"
        )));
    }
    let hi = nf.powf(gamma);
    let lo = nf.powi(-4);
    let mut part = XPartition {
        scale: nf.sqrt() / norm_sq.sqrt(),
        gamma,
        h1: Vec::new(),
        h2: Vec::new(),
        tail: Vec::new(),
    };
    for (j, &v) in x_scaled.as_slice().iter().enumerate() {
        let sq = v * v;
        if sq >= hi {
            part.h1.push(j);
        } else if sq <= lo {
            part.h2.push(j);
        } else {
            part.tail.push(j);
        }
    }
    debug_assert!(part.h1.len() as f64 <= XPartition::h1_bound(n, gamma) * (1.0 + 1e-9));
    Ok(part)
}

/// `(y_H)_i = Σ_{j ∈ H1} K_ij x_j`, exactly. Costs `O(d · rows · |H1|)`.
pub fn compute_y_h(problem: &KernelProblem, x_scaled: &RealVector, part: &XPartition) -> RealVector {
    restricted_matvec(problem, x_scaled, &part.h1)
}

/// `Σ_{j ∈ cols} K_ij x_j` for every row, summing in the order of `cols`.
pub fn restricted_matvec(problem: &KernelProblem, x: &RealVector, cols: &[usize]) -> RealVector {
    if cols.is_empty() {
        return RealVector::zeros(problem.rows());
    }
    let kernel = problem.kernel();
    let keys = problem.keys();
    let xs = x.as_slice();
    let y = (0..problem.rows())
        .into_par_iter()
        .map(|i| {
            let q = problem.queries().point(i);
            cols.iter()
                .map(|&j| kernel.value(q, keys.point(j)) * xs[j])
                .sum()
        })
        .collect();
    RealVector::from_vec_unchecked(y)
}
