//! End-to-end approximate product `y ≈ Kx` with `‖Kx - y‖₂ ≤ ε‖x‖₂`.
//!
//! Pipeline: scale `x` to `‖x‖² = n`, split coordinates, multiply the huge
//! columns exactly, find heavy keys per query, add their contribution
//! exactly, estimate the remaining light contribution at accuracy `ε/2`,
//! then undo the scaling.

use rayon::prelude::*;

use crate::error::{check_param, Error, Result};
use crate::kde::EstimatorKind;
use crate::kernel::{exact_matvec, KernelProblem, Matrix, RealVector};
use crate::lightsampler::{approx_light, median, BudgetRule, LightConfig, LightMode, LightStats};
use crate::lsh::{heavy_index, HeavySearch, DEFAULT_TABLE_FACTOR};
use crate::preprocess::{compute_y_h, normalize_x, partition_x};
use crate::reduction::{normalized_attention_flagged, reduce_instance, AttentionInstance, AttentionOutput};
use crate::rng::{derive_seed, tag};

pub const DEFAULT_GAMMA: f64 = 0.109;
pub const DEFAULT_ALPHA: f64 = 1.0 / 3.0;
pub const DEFAULT_DELTA: f64 = 0.01;
/// Below this many keys the dense product is cheaper than the pipeline.
pub const DEFAULT_EXACT_CUTOFF: usize = 256;
/// Per-run failure probability the amplification count is sized against.
const RUN_FAILURE: f64 = 0.01;
/// Per-group failure probability of a Chebyshev-sized group average.
const GROUP_FAILURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproxConfig {
    pub eps: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub budget: BudgetRule,
    pub uniform_budget: bool,
    pub heavy_search: HeavySearch,
    pub light_mode: LightMode,
    pub table_factor: f64,
    pub exact_cutoff: usize,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            seed: 0,
            estimator: EstimatorKind::default(),
            budget: BudgetRule::default(),
            uniform_budget: false,
            heavy_search: HeavySearch::default(),
            light_mode: LightMode::default(),
            table_factor: DEFAULT_TABLE_FACTOR,
            exact_cutoff: DEFAULT_EXACT_CUTOFF,
        }
    }
}

impl ApproxConfig {
    pub fn new(eps: f64, seed: u64) -> Self {
        Self {
            eps,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_param("eps", self.eps, self.eps > 0.0 && self.eps <= 1.0, "must lie in (0, 1]")?;
        check_param("gamma", self.gamma, (0.0..=1.0).contains(&self.gamma), "must lie in [0, 1]")?;
        check_param("alpha", self.alpha, self.alpha > 0.0 && self.alpha <= 1.0, "must lie in (0, 1]")?;
        check_param("delta", self.delta, self.delta > 0.0 && self.delta < 1.0, "must lie in (0, 1)")?;
        check_param(
            "table_factor",
            self.table_factor,
            self.table_factor > 0.0 && self.table_factor.is_finite(),
            "must be positive",
        )
    }

    fn light_config(&self, seed: u64) -> LightConfig {
        let mut c = LightConfig::new(self.eps / 2.0, self.gamma, seed);
        c.budget = self.budget;
        c.uniform_budget = self.uniform_budget;
        c.estimator = self.estimator;
        c.mode = self.light_mode;
        c
    }
}

/// `D(a ‖ b)` between Bernoulli laws.
fn bernoulli_kl(a: f64, b: f64) -> f64 {
    let term = |p: f64, q: f64| if p == 0.0 { 0.0 } else { p * (p / q).ln() };
    term(a, b) + term(1.0 - a, 1.0 - b)
}

/// Independent runs combined by a component-wise median: 1 when
/// `δ ≥ 0.01`, else the odd count making a majority of runs fail with
/// probability at most `δ` when each fails with probability `0.01`.
pub fn amplification_runs(delta: f64) -> usize {
    if delta >= RUN_FAILURE {
        return 1;
    }
    let r = ((1.0 / delta).ln() / bernoulli_kl(0.5, RUN_FAILURE)).ceil() as usize;
    r.max(1) | 1
}

/// Union-bound accounting of stage failure probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FailureBudget {
    /// A heavy key missed by every table, summed over pairs.
    pub heavy: f64,
    /// Some group median off by more than `ε/2`, given budgets that
    /// over-estimate the light squared mass.
    pub light: f64,
    /// Some budget under-estimating its row's mass. `None` for rules without
    /// a one-sided guarantee.
    pub budgets: Option<f64>,
    pub runs: usize,
    /// Probability that a majority of runs fail; `None` if any stage is
    /// unbounded.
    pub total: Option<f64>,
}

/// Failure accounting for one configuration. `sampled_kde_queries` counts
/// KDE queries answered by a non-exact structure.
pub fn failure_budget(
    n: usize,
    rows: usize,
    cfg: &ApproxConfig,
    used_tables: bool,
    sampled_kde_queries: usize,
) -> FailureBudget {
    let nf = n as f64;
    let heavy = if used_tables {
        let tables = (cfg.table_factor * nf.powf(cfg.alpha) * nf.ln()).ceil();
        (rows as f64 * nf * (-tables * nf.powf(-cfg.alpha)).exp()).min(1.0)
    } else {
        0.0
    };
    let groups = LightConfig::new(cfg.eps / 2.0, cfg.gamma, 0).groups(n) as f64;
    let light = if cfg.light_mode == LightMode::Exact {
        0.0
    } else {
        (rows as f64 * (-groups * bernoulli_kl(0.5, GROUP_FAILURE)).exp()).min(1.0)
    };
    let budgets = match (cfg.light_mode, cfg.budget) {
        (LightMode::Exact, _) | (_, BudgetRule::Exact) => Some(0.0),
        (_, BudgetRule::Kde) => Some((sampled_kde_queries as f64 / (nf * nf)).min(1.0)),
        (_, BudgetRule::IndexLight) => None,
    };
    let runs = amplification_runs(cfg.delta);
    let total = budgets.map(|b| {
        let p = (heavy + light + b).min(1.0);
        if runs == 1 || p >= 0.5 {
            p
        } else {
            (-(runs as f64) * bernoulli_kl(0.5, p)).exp().min(p)
        }
    });
    FailureBudget {
        heavy,
        light,
        budgets,
        runs,
        total,
    }
}

/// What one call did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApproxReport {
    /// The dense product was used (small `n` or zero `x`).
    pub exact_fallback: bool,
    pub runs: usize,
    pub h1: usize,
    pub h2: usize,
    pub tail: usize,
    pub heavy_pairs: usize,
    pub candidates_scanned: usize,
    pub light: LightStats,
}

/// One independent run on normalized input; returns the scaled-space output.
fn single_run(
    problem: &KernelProblem,
    x: &RealVector,
    cfg: &ApproxConfig,
    seed: u64,
    report: &mut ApproxReport,
) -> Result<Vec<f64>> {
    let (xs, scale) = normalize_x(x)?;
    let part = partition_x(&xs, cfg.gamma)?;
    let y_h = compute_y_h(problem, &xs, &part);
    let heavy = heavy_index(
        problem,
        cfg.alpha,
        derive_seed(seed, &[tag::LSH]),
        cfg.heavy_search,
        cfg.table_factor,
    )?;
    let mut in_tail = vec![false; problem.n()];
    for &j in &part.tail {
        in_tail[j] = true;
    }
    let heavy_part: Vec<f64> = heavy
        .sets
        .par_iter()
        .zip(&heavy.heavy_values)
        .map(|(set, vals)| {
            set.iter()
                .zip(vals)
                .filter(|(&j, _)| in_tail[j])
                .map(|(&j, &v)| v * xs[j])
                .sum()
        })
        .collect();
    let light = approx_light(problem, &xs, &part.tail, &heavy, &cfg.light_config(seed))?;

    report.h1 = part.h1.len();
    report.h2 = part.h2.len();
    report.tail = part.tail.len();
    report.heavy_pairs += heavy.total_heavy();
    report.candidates_scanned += heavy.candidates_scanned;
    report.light.rows_sampled += light.stats.rows_sampled;
    report.light.rows_saturated += light.stats.rows_saturated;
    report.light.rows_empty += light.stats.rows_empty;
    report.light.samples += light.stats.samples;

    Ok((0..problem.rows())
        .map(|i| (y_h[i] + heavy_part[i] + light.z[i]) / scale)
        .collect())
}

/// `y ≈ Kx` with the report of what was done.
pub fn approx_kmv_with_report(
    problem: &KernelProblem,
    x: &RealVector,
    cfg: &ApproxConfig,
) -> Result<(RealVector, ApproxReport)> {
    cfg.validate()?;
    if x.len() != problem.n() {
        return Err(Error::LengthMismatch {
            expected: problem.n(),
            found: x.len(),
        });
    }
    let mut report = ApproxReport::default();
    if x.is_zero() {
        report.exact_fallback = true;
        return Ok((RealVector::zeros(problem.rows()), report));
    }
    if problem.n() < cfg.exact_cutoff.max(2) {
        report.exact_fallback = true;
        return Ok((exact_matvec(problem, x)?, report));
    }
    let runs = amplification_runs(cfg.delta);
    report.runs = runs;
    if runs == 1 {
        let y = single_run(problem, x, cfg, cfg.seed, &mut report)?;
        return Ok((RealVector::new(y)?, report));
    }
    let outputs: Vec<Vec<f64>> = (0..runs)
        .map(|r| single_run(problem, x, cfg, derive_seed(cfg.seed, &[tag::AMPLIFY, r as u64]), &mut report))
        .collect::<Result<_>>()?;
    let y = (0..problem.rows())
        .map(|i| median(&mut outputs.iter().map(|o| o[i]).collect::<Vec<_>>()))
        .collect();
    Ok((RealVector::new(y)?, report))
}

/// `y ≈ Kx` with `‖Kx - y‖₂ ≤ ε‖x‖₂` with probability at least `1 - δ`.
pub fn approx_kmv(problem: &KernelProblem, x: &RealVector, cfg: &ApproxConfig) -> Result<RealVector> {
    approx_kmv_with_report(problem, x, cfg).map(|(y, _)| y)
}

/// Normalized attention `D⁻¹AV` through one reduction and approximate
/// kernel products. Rows with a non-positive row-sum estimate are flagged.
pub fn approx_attention(att: &AttentionInstance, cfg: &ApproxConfig) -> Result<AttentionOutput> {
    let values: &Matrix = att
        .values
        .as_ref()
        .ok_or(Error::Empty("attention values"))?;
    let red = reduce_instance(att)?;
    normalized_attention_flagged(&red, values, |p, v| approx_kmv(p, v, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{GaussianKernel, PointSet};
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn clustered(n: usize, d: usize, seed: u64) -> KernelProblem {
        let mut rng = rng::stream(seed, &[]);
        let mut rows = Vec::new();
        while rows.len() < n {
            let c: Vec<f64> = (0..d).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            for _ in 0..4 {
                rows.push(c.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
            }
        }
        rows.truncate(n);
        let pts = PointSet::from_rows(&rows).unwrap();
        KernelProblem::new(pts.clone(), pts, GaussianKernel::new(1.0).unwrap()).unwrap()
    }

    fn mixed_x(n: usize, seed: u64) -> RealVector {
        let mut rng = rng::stream(seed, &[7]);
        RealVector::new((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_and_small_inputs() {
        let p = clustered(300, 3, 1);
        let cfg = ApproxConfig::new(0.5, 1);
        assert_eq!(approx_kmv(&p, &RealVector::zeros(300), &cfg).unwrap(), RealVector::zeros(300));
        let small = clustered(100, 3, 2);
        let x = mixed_x(100, 2);
        assert_eq!(approx_kmv(&small, &x, &cfg).unwrap(), exact_matvec(&small, &x).unwrap());
        assert!(approx_kmv(&p, &mixed_x(10, 0), &cfg).is_err());
        assert!(approx_kmv(&p, &mixed_x(300, 0), &ApproxConfig::new(0.0, 0)).is_err());
    }

    #[test]
    fn decomposition_with_exact_parts_is_exact() {
        let p = clustered(400, 3, 3);
        let x = mixed_x(400, 3);
        let cfg = ApproxConfig {
            heavy_search: HeavySearch::BruteForce,
            light_mode: LightMode::Exact,
            ..ApproxConfig::new(0.5, 3)
        };
        let y = approx_kmv(&p, &x, &cfg).unwrap();
        let exact = exact_matvec(&p, &x).unwrap();
        for i in 0..400 {
            assert!((y[i] - exact[i]).abs() <= 1e-10 * exact[i].abs().max(1.0));
        }
    }

    #[test]
    fn bound_is_scale_free() {
        let p = clustered(512, 4, 4);
        let x = mixed_x(512, 4);
        let big = RealVector::new(x.as_slice().iter().map(|v| v * 1e3).collect()).unwrap();
        for rule in [BudgetRule::Kde, BudgetRule::IndexLight] {
            let cfg = ApproxConfig {
                budget: rule,
                ..ApproxConfig::new(0.5, 4)
            };
            for v in [&x, &big] {
                let y = approx_kmv(&p, v, &cfg).unwrap();
                let err = y.distance(&exact_matvec(&p, v).unwrap());
                assert!(err <= 0.5 * v.norm(), "{rule:?}: {err} vs {}", 0.5 * v.norm());
            }
        }
    }

    #[test]
    fn amplification_counts() {
        assert_eq!(amplification_runs(0.01), 1);
        assert_eq!(amplification_runs(0.5), 1);
        let r = amplification_runs(1e-6);
        assert_eq!(r % 2, 1);
        assert!((-(r as f64) * bernoulli_kl(0.5, 0.01)).exp() <= 1e-6);
        let p = clustered(300, 3, 5);
        let x = mixed_x(300, 5);
        let cfg = ApproxConfig {
            delta: 1e-3,
            budget: BudgetRule::IndexLight,
            ..ApproxConfig::new(0.5, 5)
        };
        let (y, rep) = approx_kmv_with_report(&p, &x, &cfg).unwrap();
        assert_eq!(rep.runs, amplification_runs(1e-3));
        assert!(y.distance(&exact_matvec(&p, &x).unwrap()) <= 0.5 * x.norm());
    }

    #[test]
    fn failure_accounting_is_within_delta() {
        for n in [512usize, 2048, 8192] {
            let cfg = ApproxConfig::default();
            let fb = failure_budget(n, n, &cfg, true, 0);
            assert!(fb.total.unwrap() <= cfg.delta, "{fb:?}");
            let tight = ApproxConfig {
                delta: 1e-6,
                ..cfg
            };
            assert!(failure_budget(n, n, &tight, true, 0).total.unwrap() <= 1e-6);
            let idx = ApproxConfig {
                budget: BudgetRule::IndexLight,
                ..cfg
            };
            assert_eq!(failure_budget(n, n, &idx, true, 0).total, None);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = clustered(512, 4, 6);
        let x = mixed_x(512, 6);
        let cfg = ApproxConfig {
            budget: BudgetRule::IndexLight,
            ..ApproxConfig::new(0.5, 6)
        };
        assert_eq!(approx_kmv(&p, &x, &cfg).unwrap(), approx_kmv(&p, &x, &cfg).unwrap());
    }

    #[test]
    fn attention_with_exact_parts_matches_softmax() {
        let mut rng = rng::stream(9, &[]);
        let n = 300;
        let d = 4;
        let gen = |rng: &mut rng::StreamRng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let q = PointSet::from_rows(&gen(&mut rng)).unwrap();
        let k = PointSet::from_rows(&gen(&mut rng)).unwrap();
        let v = Matrix::from_rows(&(0..n).map(|j| [1.0, j as f64 / n as f64]).collect::<Vec<_>>()).unwrap();
        let att = AttentionInstance::new(q, k, Some(v.clone())).unwrap();
        let cfg = ApproxConfig {
            heavy_search: HeavySearch::BruteForce,
            light_mode: LightMode::Exact,
            ..ApproxConfig::new(0.5, 9)
        };
        let out = approx_attention(&att, &cfg).unwrap();
        assert!(out.failed_rows.is_empty());
        let oracle = crate::reduction::softmax_attention_oracle(&att, &v);
        for i in 0..n {
            assert!((out.output.get(i, 0) - 1.0).abs() < 1e-8);
            assert!((out.output.get(i, 1) - oracle.get(i, 1)).abs() < 1e-8);
        }
    }
}
