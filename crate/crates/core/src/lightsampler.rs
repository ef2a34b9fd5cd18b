//! Estimation of the light-key contribution `Σ_{j ∈ T \ S_i} K_ij x_j` for
//! every row.
//!
//! One repetition keeps each light key with probability `1/n` and sums
//! `n · x_j · K_ij` over the survivors; it is unbiased with variance at most
//! `n · Σ x_j² K_ij²`. A row averages `r_i = max(1, ⌈10 n s_i / ε²⌉)`
//! repetitions per group, where `s_i` over-estimates that squared mass, and
//! reports the median of `10 ⌈ln n⌉` group averages.
//!
//! Budgets come from one of three rules:
//! * [`BudgetRule::Kde`]: per-bucket squared-kernel KDEs over the rounded
//!   weights, minus the heavy part, plus a relative slack `n^-0.218 t_i`.
//! * [`BudgetRule::IndexLight`]: a Horvitz-Thompson estimate of the light
//!   squared mass over the light candidates the heavy-key search already
//!   verified, inflated by `1 + n^-0.218`.
//! * [`BudgetRule::Exact`]: the exact light squared mass (reference only).
//!
//! A row whose total work would reach an exact scan is summed exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_param, Error, Result};
use crate::kde::{build_kde, EstimatorKind, KdeConfig, KdeStructure};
use crate::kernel::{GaussianKernel, KernelProblem, PointSet, RealVector};
use crate::lsh::HeavyIndex;
use crate::rng::{self, tag};

pub const DEFAULT_BETA_EXPONENT: f64 = 0.218;
pub const DEFAULT_REPETITION_CONSTANT: f64 = 10.0;
pub const DEFAULT_GROUP_CONSTANT: f64 = 10.0;

/// Tail indices grouped by `(1+ε)^{m-1} < x_j² ≤ (1+ε)^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketPartition {
    pub eps: f64,
    pub buckets: BTreeMap<i32, Vec<usize>>,
}

impl BucketPartition {
    /// Rounded weight `x̄² = (1+ε)^m` of bucket `m`.
    pub fn weight(&self, m: i32) -> f64 {
        (1.0 + self.eps).powi(m)
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// Smallest `m` with `x² ≤ (1+ε)^m`.
fn bucket_of(sq: f64, eps: f64) -> i32 {
    let base = 1.0 + eps;
    let mut m = (sq.ln() / base.ln()).ceil() as i32;
    while base.powi(m) < sq {
        m += 1;
    }
    while base.powi(m - 1) >= sq {
        m -= 1;
    }
    m
}

/// Buckets the tail coordinates of a normalized `x` by magnitude.
pub fn bucketize_x(x_scaled: &RealVector, tail: &[usize], eps: f64, gamma: f64) -> Result<BucketPartition> {
    check_param("eps", eps, eps > 0.0 && eps.is_finite(), "must be positive")?;
    let n = x_scaled.len() as f64;
    let log_base = (1.0 + eps).ln();
    let lo = (-4.0 * n.ln() / log_base).ceil() as i32 - 1;
    let hi = (gamma * n.ln() / log_base).ceil() as i32 + 1;
    let mut buckets: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for &j in tail {
        let sq = x_scaled[j] * x_scaled[j];
        let m = if sq > 0.0 { bucket_of(sq, eps) } else { i32::MIN };
        if m < lo || m > hi {
            return Err(Error::Precondition(format!(
                "x_{j}² = {sq} lies outside the tail magnitude range"
            )));
        }
        buckets.entry(m).or_default().push(j);
    }
    Ok(BucketPartition { eps, buckets })
}

/// KDE lower threshold `ε² / (n ln² n (1+ε)^m |B_m|)`, capped at 1.
pub fn bucket_mu(n: usize, eps: f64, m: i32, size: usize) -> f64 {
    let nf = n as f64;
    let ln = nf.ln().max(f64::MIN_POSITIVE);
    (eps * eps / (nf * ln * ln * (1.0 + eps).powi(m) * size as f64)).min(1.0)
}

/// Squared-kernel KDE of one bucket's keys.
#[derive(Clone, Debug)]
pub struct BucketKde {
    pub m: i32,
    pub weight: f64,
    pub size: usize,
    pub kde: KdeStructure,
}

/// One KDE per nonempty bucket with bandwidth `σ/√2`, relative error `β`
/// and failure probability `1/n²`.
pub fn build_bucket_kdes(
    keys: &PointSet,
    part: &BucketPartition,
    kernel: GaussianKernel,
    n: usize,
    beta: f64,
    kind: EstimatorKind,
    seed: u64,
) -> Result<Vec<BucketKde>> {
    let delta = (1.0 / (n as f64 * n as f64)).min(0.5);
    part.buckets
        .iter()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(&m, idx)| {
            let mu = bucket_mu(n, part.eps, m, idx.len());
            let cfg = KdeConfig::new(beta, mu, delta, kind, rng::derive_seed(seed, &[m as u64]))?;
            Ok(BucketKde {
                m,
                weight: part.weight(m),
                size: idx.len(),
                kde: build_kde(keys.select(idx)?, kernel.squared(), cfg)?,
            })
        })
        .collect()
}

/// How the per-row light budget `s_i` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BudgetRule {
    /// From bucket KDE estimates of `Σ x_j² K_ij²`, minus the exact heavy
    /// part, plus a `β t_i` slack.
    #[default]
    Kde,
    /// From the light candidates the heavy search already verified, each
    /// weighted by its inverse inclusion probability.
    IndexLight,
    /// From the exact light squared mass; for tests.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LightMode {
    #[default]
    Sampled,
    /// Sum every light key exactly (reference path).
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightConfig {
    pub eps: f64,
    pub gamma: f64,
    pub beta_exponent: f64,
    pub repetition_constant: f64,
    pub group_constant: f64,
    pub budget: BudgetRule,
    /// Replace each row's budget by the largest one.
    pub uniform_budget: bool,
    pub estimator: EstimatorKind,
    pub mode: LightMode,
    pub seed: u64,
}

impl LightConfig {
    pub fn new(eps: f64, gamma: f64, seed: u64) -> Self {
        Self {
            eps,
            gamma,
            beta_exponent: DEFAULT_BETA_EXPONENT,
            repetition_constant: DEFAULT_REPETITION_CONSTANT,
            group_constant: DEFAULT_GROUP_CONSTANT,
            budget: BudgetRule::default(),
            uniform_budget: false,
            estimator: EstimatorKind::default(),
            mode: LightMode::default(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        check_param("eps", self.eps, self.eps > 0.0 && self.eps <= 1.0, "must lie in (0, 1]")?;
        check_param("gamma", self.gamma, (0.0..=1.0).contains(&self.gamma), "must lie in [0, 1]")?;
        check_param(
            "beta_exponent",
            self.beta_exponent,
            self.beta_exponent > 0.0 && self.beta_exponent.is_finite(),
            "must be positive",
        )?;
        check_param(
            "repetition_constant",
            self.repetition_constant,
            self.repetition_constant > 0.0 && self.repetition_constant.is_finite(),
            "must be positive",
        )?;
        check_param(
            "group_constant",
            self.group_constant,
            self.group_constant > 0.0 && self.group_constant.is_finite(),
            "must be positive",
        )
    }

    /// Number of groups `⌈c ⌈ln n⌉⌉`, at least 1.
    pub fn groups(&self, n: usize) -> usize {
        ((self.group_constant * (n as f64).ln().ceil()).ceil() as usize).max(1)
    }

    /// Relative slack `n^-exponent`.
    pub fn beta(&self, n: usize) -> f64 {
        (n as f64).powf(-self.beta_exponent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowBudget {
    /// Estimated rounded squared mass over the tail (zero for rules that do
    /// not form it).
    pub t: f64,
    /// Estimated light squared mass, clamped at 0.
    pub s: f64,
    pub repetitions: u64,
}

/// `max(1, ⌈c n s / ε²⌉)`, saturating.
pub fn repetitions_for(s: f64, n: usize, eps: f64, constant: f64) -> u64 {
    let r = (constant * n as f64 * s / (eps * eps)).ceil();
    if r >= u64::MAX as f64 {
        u64::MAX
    } else {
        (r as u64).max(1)
    }
}

/// The KDE rule's budget for row `i`.
pub fn row_budget(
    q: &[f64],
    kdes: &[BucketKde],
    heavy_set: &[usize],
    heavy_values: &[f64],
    in_tail: &[bool],
    x_scaled: &RealVector,
    n: usize,
    cfg: &LightConfig,
) -> Result<RowBudget> {
    let mut t = 0.0;
    for b in kdes {
        t += b.weight * b.size as f64 * b.kde.query(q)?;
    }
    let correction: f64 = heavy_set
        .iter()
        .zip(heavy_values)
        .filter(|(&j, _)| in_tail[j])
        .map(|(&j, &v)| x_scaled[j] * x_scaled[j] * v * v)
        .sum();
    let s = (t - correction + cfg.beta(n) * t).max(0.0);
    Ok(RowBudget {
        t,
        s,
        repetitions: repetitions_for(s, n, cfg.eps, cfg.repetition_constant),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LightStats {
    pub rows_sampled: usize,
    pub rows_saturated: usize,
    /// Rows with no light keys.
    pub rows_empty: usize,
    /// Surviving keys evaluated across all sampled rows.
    pub samples: u64,
}

#[derive(Clone, Debug)]
pub struct LightResult {
    pub z: RealVector,
    pub budgets: Vec<RowBudget>,
    pub stats: LightStats,
}

/// Median; an even count takes the mean of the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

enum RowOutcome {
    Empty,
    Saturated(f64),
    Sampled(f64, u64),
}

fn is_heavy(set: &[usize], j: usize) -> bool {
    set.binary_search(&j).is_ok()
}

fn exact_light_sum(problem: &KernelProblem, i: usize, x: &RealVector, tail: &[usize], set: &[usize]) -> f64 {
    let q = problem.queries().point(i);
    let kernel = problem.kernel();
    tail.iter()
        .filter(|&&j| !is_heavy(set, j))
        .map(|&j| kernel.value(q, problem.keys().point(j)) * x[j])
        .sum()
}

/// Number of failures before the first success of a `p`-coin.
#[inline]
fn geometric_skip(rng: &mut rng::StreamRng, log_q: f64) -> u64 {
    if log_q == f64::NEG_INFINITY {
        return 0;
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    let s = (u.ln() / log_q).floor();
    if s >= u64::MAX as f64 {
        u64::MAX
    } else {
        s as u64
    }
}

/// Median of `groups` averages of `r` subsampling repetitions. Slots
/// `(repetition, tail position)` are visited by geometric skips, which is
/// the same law as an independent `1/n` coin per slot.
fn sampled_row(
    problem: &KernelProblem,
    i: usize,
    x: &RealVector,
    tail: &[usize],
    set: &[usize],
    r: u64,
    groups: usize,
    seed: u64,
) -> (f64, u64) {
    let n = problem.n();
    let nf = n as f64;
    let q = problem.queries().point(i);
    let kernel = problem.kernel();
    let log_q = (-1.0 / nf).ln_1p();
    let slots = r.saturating_mul(tail.len() as u64);
    let mut samples = 0;
    let mut avgs: Vec<f64> = (0..groups)
        .map(|g| {
            let mut rng = rng::stream(seed, &[tag::LIGHT, i as u64, g as u64]);
            let mut sum = 0.0;
            let mut pos = geometric_skip(&mut rng, log_q);
            while pos < slots {
                let j = tail[(pos % tail.len() as u64) as usize];
                if !is_heavy(set, j) {
                    sum += nf * x[j] * kernel.value(q, problem.keys().point(j));
                    samples += 1;
                }
                pos = pos.saturating_add(1).saturating_add(geometric_skip(&mut rng, log_q));
            }
            sum / r as f64
        })
        .collect();
    (median(&mut avgs), samples)
}

/// Estimates `z_i ≈ Σ_{j ∈ T \ S_i} K_ij x_j` for every row.
pub fn approx_light(
    problem: &KernelProblem,
    x_scaled: &RealVector,
    tail: &[usize],
    heavy: &HeavyIndex,
    cfg: &LightConfig,
) -> Result<LightResult> {
    cfg.validate()?;
    let n = problem.n();
    if x_scaled.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: x_scaled.len(),
        });
    }
    if heavy.rows() != problem.rows() {
        return Err(Error::LengthMismatch {
            expected: problem.rows(),
            found: heavy.rows(),
        });
    }
    let rows = problem.rows();
    let mut in_tail = vec![false; n];
    for &j in tail {
        in_tail[j] = true;
    }

    let mut budgets = if cfg.mode == LightMode::Exact || tail.is_empty() {
        vec![
            RowBudget {
                t: 0.0,
                s: 0.0,
                repetitions: 1,
            };
            rows
        ]
    } else {
        compute_budgets(problem, x_scaled, tail, &in_tail, heavy, cfg)?
    };
    if cfg.uniform_budget {
        if let Some(top) = budgets.iter().copied().max_by(|a, b| a.s.total_cmp(&b.s)) {
            for b in &mut budgets {
                b.s = top.s;
                b.repetitions = top.repetitions;
            }
        }
    }

    let groups = cfg.groups(n);
    let outcomes: Vec<RowOutcome> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let set = &heavy.sets[i];
            let light_count = tail.len() - set.iter().filter(|&&j| in_tail[j]).count();
            if light_count == 0 {
                return RowOutcome::Empty;
            }
            let r = budgets[i].repetitions;
            if cfg.mode == LightMode::Exact || (groups as u64).saturating_mul(r) >= n as u64 {
                return RowOutcome::Saturated(exact_light_sum(problem, i, x_scaled, tail, set));
            }
            let (z, samples) = sampled_row(problem, i, x_scaled, tail, set, r, groups, cfg.seed);
            RowOutcome::Sampled(z, samples)
        })
        .collect();

    let mut stats = LightStats::default();
    let z = outcomes
        .into_iter()
        .map(|o| match o {
            RowOutcome::Empty => {
                stats.rows_empty += 1;
                0.0
            }
            RowOutcome::Saturated(v) => {
                stats.rows_saturated += 1;
                v
            }
            RowOutcome::Sampled(v, s) => {
                stats.rows_sampled += 1;
                stats.samples += s;
                v
            }
        })
        .collect();
    Ok(LightResult {
        z: RealVector::new(z)?,
        budgets,
        stats,
    })
}

fn compute_budgets(
    problem: &KernelProblem,
    x: &RealVector,
    tail: &[usize],
    in_tail: &[bool],
    heavy: &HeavyIndex,
    cfg: &LightConfig,
) -> Result<Vec<RowBudget>> {
    let n = problem.n();
    let beta = cfg.beta(n);
    let rows = 0..problem.rows();
    match cfg.budget {
        BudgetRule::Kde => {
            let part = bucketize_x(x, tail, cfg.eps, cfg.gamma)?;
            let kdes = build_bucket_kdes(
                problem.keys(),
                &part,
                problem.kernel(),
                n,
                beta,
                cfg.estimator,
                rng::derive_seed(cfg.seed, &[tag::KDE]),
            )?;
            rows.into_par_iter()
                .map(|i| {
                    row_budget(
                        problem.queries().point(i),
                        &kdes,
                        &heavy.sets[i],
                        &heavy.heavy_values[i],
                        in_tail,
                        x,
                        n,
                        cfg,
                    )
                })
                .collect()
        }
        BudgetRule::IndexLight => Ok(rows
            .into_par_iter()
            .map(|i| {
                let mass: f64 = heavy.light[i]
                    .iter()
                    .filter(|c| in_tail[c.index as usize])
                    .map(|c| {
                        let xj = x[c.index as usize];
                        xj * xj * c.kernel * c.kernel / c.inclusion
                    })
                    .sum();
                let s = (1.0 + beta) * mass;
                RowBudget {
                    t: 0.0,
                    s,
                    repetitions: repetitions_for(s, n, cfg.eps, cfg.repetition_constant),
                }
            })
            .collect()),
        BudgetRule::Exact => Ok(rows
            .into_par_iter()
            .map(|i| {
                let q = problem.queries().point(i);
                let kernel = problem.kernel();
                let s: f64 = tail
                    .iter()
                    .filter(|&&j| !is_heavy(&heavy.sets[i], j))
                    .map(|&j| (x[j] * kernel.value(q, problem.keys().point(j))).powi(2))
                    .sum();
                RowBudget {
                    t: 0.0,
                    s,
                    repetitions: repetitions_for(s, n, cfg.eps, cfg.repetition_constant),
                }
            })
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::find_heavy_brute_force;
    use crate::preprocess::{normalize_x, partition_x};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_problem(n: usize, d: usize, scale: f64, seed: u64) -> KernelProblem {
        let mut rng = rng::stream(seed, &[]);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let pts = PointSet::from_rows(&rows).unwrap();
        KernelProblem::new(pts.clone(), pts, GaussianKernel::new(1.0).unwrap()).unwrap()
    }

    fn random_x(n: usize, seed: u64) -> RealVector {
        let mut rng = rng::stream(seed, &[99]);
        let raw = RealVector::new((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        normalize_x(&raw).unwrap().0
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_of(3.0, 1.0), 2);
        assert_eq!(bucket_of(4.0, 1.0), 2);
        assert_eq!(bucket_of(4.000001, 1.0), 3);
        assert_eq!(bucket_of(1.0, 0.5), 0);
        assert_eq!(bucket_of(1.5, 0.5), 1);
        let x = RealVector::new(vec![1.0; 6]).unwrap();
        let p = bucketize_x(&x, &[0, 1, 2, 3, 4, 5], 0.3, 0.1).unwrap();
        assert_eq!(p.buckets.keys().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(p.weight(0), 1.0);
    }

    #[test]
    fn mu_spot_check() {
        let mu = bucket_mu(100, 0.5, 0, 10);
        let expected = 0.25 / (100.0 * 100f64.ln().powi(2) * 1.0 * 10.0);
        assert!((mu - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn exact_kde_budget_matches_rounded_mass() {
        let p = random_problem(64, 2, 1.5, 1);
        let x = random_x(64, 1);
        let part = partition_x(&x, 0.109).unwrap();
        let bp = bucketize_x(&x, &part.tail, 0.5, 0.109).unwrap();
        let kdes = build_bucket_kdes(p.keys(), &bp, p.kernel(), 64, 0.3, EstimatorKind::Exact, 0).unwrap();
        let mut in_tail = vec![false; 64];
        part.tail.iter().for_each(|&j| in_tail[j] = true);
        let cfg = LightConfig::new(0.5, 0.109, 0);
        for i in 0..64 {
            let b = row_budget(p.queries().point(i), &kdes, &[], &[], &in_tail, &x, 64, &cfg).unwrap();
            let mut oracle = 0.0;
            for (&m, idx) in &bp.buckets {
                for &j in idx {
                    oracle += bp.weight(m) * p.entry(i, j).powi(2);
                }
            }
            assert!((b.t - oracle).abs() <= 1e-10 * oracle);
            assert!((b.s - (1.0 + cfg.beta(64)) * oracle).abs() <= 1e-10 * oracle);
        }
    }

    #[test]
    fn far_query_gets_unit_budget() {
        let keys = PointSet::from_rows(&[[0.0], [0.1], [0.2]]).unwrap();
        let queries = PointSet::from_rows(&[[1e4]]).unwrap();
        let p = KernelProblem::new(queries, keys, GaussianKernel::new(1.0).unwrap()).unwrap();
        let x = RealVector::new(vec![1.0; 3]).unwrap();
        let bp = bucketize_x(&x, &[0, 1, 2], 0.5, 0.1).unwrap();
        let kdes = build_bucket_kdes(p.keys(), &bp, p.kernel(), 3, 0.3, EstimatorKind::UniformSampling, 0).unwrap();
        let cfg = LightConfig::new(0.5, 0.1, 0);
        let b = row_budget(p.queries().point(0), &kdes, &[], &[], &[true; 3], &x, 3, &cfg).unwrap();
        assert_eq!((b.t, b.s, b.repetitions), (0.0, 0.0, 1));
    }

    #[test]
    fn rounding_over_approximates() {
        let p = random_problem(80, 3, 1.0, 2);
        let x = random_x(80, 2);
        let part = partition_x(&x, 0.109).unwrap();
        for eps in [0.1, 0.5, 1.0] {
            let bp = bucketize_x(&x, &part.tail, eps, 0.109).unwrap();
            for (&m, idx) in &bp.buckets {
                for &j in idx {
                    let ratio = bp.weight(m) / (x[j] * x[j]);
                    assert!((1.0..=1.0 + eps + 1e-12).contains(&ratio));
                    assert!(idx.len() as f64 <= 80.0 / (1.0 + eps).powi(m - 1));
                }
            }
            for i in 0..5 {
                let plain: f64 = part.tail.iter().map(|&j| x[j] * x[j] * p.entry(i, j).powi(2)).sum();
                let rounded: f64 = bp
                    .buckets
                    .iter()
                    .flat_map(|(&m, idx)| idx.iter().map(move |&j| (m, j)))
                    .map(|(m, j)| bp.weight(m) * p.entry(i, j).powi(2))
                    .sum();
                assert!(rounded >= plain * (1.0 - 1e-12) && rounded <= (1.0 + eps) * plain * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn no_light_keys_gives_zero() {
        let pts = PointSet::from_rows(&vec![[0.0, 0.0]; 40]).unwrap();
        let p = KernelProblem::new(pts.clone(), pts, GaussianKernel::new(1.0).unwrap()).unwrap();
        let x = RealVector::new(vec![1.0; 40]).unwrap();
        let heavy = find_heavy_brute_force(&p, 1.0 / 3.0).unwrap();
        let tail: Vec<usize> = (0..40).collect();
        let out = approx_light(&p, &x, &tail, &heavy, &LightConfig::new(0.5, 0.1, 0)).unwrap();
        assert_eq!(out.z, RealVector::zeros(40));
        assert_eq!(out.stats.rows_empty, 40);
    }

    #[test]
    fn exact_mode_and_saturation_are_exact() {
        let p = random_problem(100, 2, 2.0, 3);
        let x = random_x(100, 3);
        let part = partition_x(&x, 0.109).unwrap();
        let heavy = find_heavy_brute_force(&p, 1.0 / 3.0).unwrap();
        let mut cfg = LightConfig::new(0.5, 0.109, 1);
        cfg.mode = LightMode::Exact;
        let exact = approx_light(&p, &x, &part.tail, &heavy, &cfg).unwrap();
        cfg.mode = LightMode::Sampled;
        // KDE budgets at this size exceed the saturation point.
        let sat = approx_light(&p, &x, &part.tail, &heavy, &cfg).unwrap();
        for i in 0..100 {
            let oracle = exact_light_sum(&p, i, &x, &part.tail, &heavy.sets[i]);
            assert_eq!(exact.z[i], oracle);
            if sat.budgets[i].repetitions * cfg.groups(100) as u64 >= 100 {
                assert_eq!(sat.z[i], oracle);
            }
        }
    }

    #[test]
    fn single_repetition_is_unbiased_with_bounded_variance() {
        // Independent estimator: one Bernoulli(1/n) coin per light key.
        let p = random_problem(16, 2, 1.0, 4);
        let x = random_x(16, 4);
        let heavy = find_heavy_brute_force(&p, 0.9).unwrap();
        let tail: Vec<usize> = (0..16).collect();
        let i = 0;
        let light: Vec<usize> = tail.iter().copied().filter(|&j| !is_heavy(&heavy.sets[i], j)).collect();
        assert!(!light.is_empty());
        let mean: f64 = light.iter().map(|&j| x[j] * p.entry(i, j)).sum();
        let bound: f64 = 16.0 * light.iter().map(|&j| (x[j] * p.entry(i, j)).powi(2)).sum::<f64>();
        let mut rng = rng::stream(5, &[]);
        let reps = 100_000;
        let draws: Vec<f64> = (0..reps)
            .map(|_| {
                light
                    .iter()
                    .filter(|_| rng.random::<f64>() < 1.0 / 16.0)
                    .map(|&j| 16.0 * x[j] * p.entry(i, j))
                    .sum()
            })
            .collect();
        let avg = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d - avg).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((avg - mean).abs() < 3.0 * (var / reps as f64).sqrt());
        assert!(var <= bound * 1.05);

        // The skip-based sampler with r = 1 and one group draws the same law.
        let sampler_draws: Vec<f64> = (0..20_000u64)
            .map(|s| sampled_row(&p, i, &x, &tail, &heavy.sets[i], 1, 1, s).0)
            .collect();
        let savg = sampler_draws.iter().sum::<f64>() / 20_000.0;
        assert!((savg - mean).abs() < 4.0 * (var / 20_000.0).sqrt());
    }

    #[test]
    fn index_light_budget_tracks_exact_mass() {
        let p = random_problem(400, 2, 3.0, 6);
        let x = random_x(400, 6);
        let part = partition_x(&x, 0.109).unwrap();
        let heavy = find_heavy_brute_force(&p, 1.0 / 3.0).unwrap();
        let mut cfg = LightConfig::new(0.25, 0.109, 2);
        cfg.budget = BudgetRule::IndexLight;
        let a = approx_light(&p, &x, &part.tail, &heavy, &cfg).unwrap();
        cfg.budget = BudgetRule::Exact;
        let b = approx_light(&p, &x, &part.tail, &heavy, &cfg).unwrap();
        for i in 0..400 {
            // Brute-force candidates have inclusion 1: the estimate is exact.
            let expect = (1.0 + cfg.beta(400)) * b.budgets[i].s;
            assert!((a.budgets[i].s - expect).abs() <= 1e-9 * expect.max(1e-300));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn error_bound_holds_for_every_rule(seed in 0u64..1000) {
            let p = random_problem(300, 2, 4.0, seed);
            let x = random_x(300, seed);
            let part = partition_x(&x, 0.109).unwrap();
            let heavy = find_heavy_brute_force(&p, 1.0 / 3.0).unwrap();
            for rule in [BudgetRule::Kde, BudgetRule::IndexLight, BudgetRule::Exact] {
                let mut cfg = LightConfig::new(0.5, 0.109, seed);
                cfg.budget = rule;
                let out = approx_light(&p, &x, &part.tail, &heavy, &cfg).unwrap();
                for i in 0..300 {
                    let oracle = exact_light_sum(&p, i, &x, &part.tail, &heavy.sets[i]);
                    prop_assert!((out.z[i] - oracle).abs() <= 0.5);
                }
                let st = &out.stats;
                prop_assert_eq!(st.rows_sampled + st.rows_saturated + st.rows_empty, 300);
            }
        }
    }
}
