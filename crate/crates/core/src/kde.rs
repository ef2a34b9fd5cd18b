//! Gaussian kernel density estimators behind one query contract:
//! for `μ(q) = (1/N) Σ_j k(q, p_j)`, if `μ(q) ≥ μ` the estimate is within
//! `(1 ± β) μ(q)` with probability at least `1 - δ`; otherwise it is `0` or at
//! most `(1 + β) μ(q)`.
//!
//! Kernels squared pointwise are Gaussian with bandwidth `σ/√2`, which is how
//! squared-kernel densities are served (see [`GaussianKernel::squared`]).

use rand::Rng;

use crate::error::{check_param, Error, Result};
use crate::kernel::{sq_dist, GaussianKernel, PointSet};
use crate::lsh::{build_tables, choose_projection, HashTables, LshFamilyConfig};
use crate::rng::{self, tag};

/// Default constant in the sample count `⌈C ln(1/δ) / (β² μ)⌉`.
pub const DEFAULT_SAMPLE_CONSTANT: f64 = 3.0;
/// Per-table collision probability for keys at the near threshold of the
/// hashing-based estimator.
const HASHING_NEAR_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EstimatorKind {
    Exact,
    #[default]
    UniformSampling,
    HashingBased,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdeConfig {
    pub beta: f64,
    pub mu: f64,
    pub delta: f64,
    pub kind: EstimatorKind,
    pub seed: u64,
    pub sample_constant: f64,
}

impl KdeConfig {
    pub fn new(beta: f64, mu: f64, delta: f64, kind: EstimatorKind, seed: u64) -> Result<Self> {
        let cfg = Self {
            beta,
            mu,
            delta,
            kind,
            seed,
            sample_constant: DEFAULT_SAMPLE_CONSTANT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_param("beta", self.beta, self.beta > 0.0 && self.beta < 1.0, "must lie in (0, 1)")?;
        check_param("mu", self.mu, self.mu > 0.0 && self.mu <= 1.0, "must lie in (0, 1]")?;
        check_param("delta", self.delta, self.delta > 0.0 && self.delta < 1.0, "must lie in (0, 1)")?;
        check_param(
            "sample_constant",
            self.sample_constant,
            self.sample_constant.is_finite() && self.sample_constant > 0.0,
            "must be positive",
        )
    }

    /// `⌈C ln(1/δ) / (β² μ)⌉`, saturating at `usize::MAX`.
    pub fn sample_count(&self) -> usize {
        let m = (self.sample_constant * (1.0 / self.delta).ln() / (self.beta * self.beta * self.mu)).ceil();
        if m >= usize::MAX as f64 {
            usize::MAX
        } else {
            m as usize
        }
    }
}

#[derive(Clone, Debug)]
enum State {
    Exact,
    Sample(Vec<u32>),
    Hashing(HashTables),
}

/// Immutable estimator over one point set.
#[derive(Clone, Debug)]
pub struct KdeStructure {
    points: PointSet,
    kernel: GaussianKernel,
    cfg: KdeConfig,
    state: State,
}

/// `(1/N) Σ_j k(q, p_j)` summed in index order.
pub fn exact_kde(points: &PointSet, kernel: GaussianKernel, q: &[f64]) -> f64 {
    points.iter().map(|p| kernel.value(q, p)).sum::<f64>() / points.n() as f64
}

/// Builds the configured estimator. Sampling and hashing structures whose
/// cost would reach that of an exact scan are built as exact instead.
pub fn build_kde(points: PointSet, kernel: GaussianKernel, cfg: KdeConfig) -> Result<KdeStructure> {
    cfg.validate()?;
    if points.n() > u32::MAX as usize {
        return Err(Error::Infeasible(format!("n = {} exceeds u32 point ids", points.n())));
    }
    let n = points.n();
    let state = match cfg.kind {
        EstimatorKind::Exact => State::Exact,
        EstimatorKind::UniformSampling => {
            let m = cfg.sample_count();
            if m >= n {
                State::Exact
            } else {
                let mut rng = rng::stream(cfg.seed, &[tag::KDE]);
                State::Sample((0..m).map(|_| rng.random_range(0..n as u32)).collect())
            }
        }
        EstimatorKind::HashingBased => hashing_state(&points, kernel, &cfg).unwrap_or(State::Exact),
    };
    Ok(KdeStructure {
        points,
        kernel,
        cfg,
        state,
    })
}

/// Tables in which every point with kernel value at least `τ = βμ/2` lands
/// with the query in some table with probability `1 - δ/N`. Points below
/// `τ` are ignored, which moves the mean by less than `βμ/2`.
fn hashing_state(points: &PointSet, kernel: GaussianKernel, cfg: &KdeConfig) -> Option<State> {
    let n = points.n();
    if n < 2 {
        return None;
    }
    let tau = cfg.beta * cfg.mu / 2.0;
    let r = kernel.radius_for_value(tau);
    let n_tables = ((n as f64 / cfg.delta).ln() / -(1.0 - HASHING_NEAR_PROBABILITY).ln()).ceil() as usize;
    let (k, w) = choose_projection(r, HASHING_NEAR_PROBABILITY, n_tables)?;
    if n_tables.saturating_mul(k) >= n {
        return None;
    }
    let family = LshFamilyConfig {
        n,
        dim: points.dim(),
        alpha: -tau.ln() / (n as f64).ln(),
        r_near: r,
        concat_width: k,
        cell_width: w,
        n_tables,
        seed: rng::derive_seed(cfg.seed, &[tag::KDE]),
    };
    build_tables(points, &family).ok().map(State::Hashing)
}

impl KdeStructure {
    pub fn config(&self) -> &KdeConfig {
        &self.cfg
    }

    pub fn n(&self) -> usize {
        self.points.n()
    }

    /// True when queries scan every point.
    pub fn is_exact(&self) -> bool {
        matches!(self.state, State::Exact)
    }

    /// Density estimate at `q`.
    pub fn query(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.points.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.points.dim(),
                found: q.len(),
            });
        }
        let raw = match &self.state {
            State::Exact => return Ok(exact_kde(&self.points, self.kernel, q)),
            State::Sample(idx) => {
                idx.iter()
                    .map(|&j| self.kernel.value(q, self.points.point(j as usize)))
                    .sum::<f64>()
                    / idx.len() as f64
            }
            State::Hashing(tables) => {
                let tau = self.cfg.beta * self.cfg.mu / 2.0;
                let family = tables.config();
                let mut cand: Vec<u32> = (0..tables.n_tables())
                    .flat_map(|t| tables.bucket(t, tables.hash(t, q)).iter().copied())
                    .collect();
                cand.sort_unstable();
                cand.dedup();
                let mut acc = 0.0;
                for j in cand {
                    let d2 = sq_dist(q, self.points.point(j as usize));
                    let v = self.kernel.from_sq_dist(d2);
                    if v >= tau {
                        acc += v / family.inclusion_probability(d2.sqrt());
                    }
                }
                acc / self.points.n() as f64
            }
        };
        Ok(self.gate(raw))
    }

    fn gate(&self, raw: f64) -> f64 {
        if raw < (1.0 - self.cfg.beta) * self.cfg.mu {
            0.0
        } else {
            raw.min(1.0 + self.cfg.beta)
        }
    }
}

/// [`KdeStructure::query`] as a free function.
pub fn query_kde(s: &KdeStructure, q: &[f64]) -> Result<f64> {
    s.query(q)
}
