//! Wall-clock scaling of the dense product against the approximate one.
//!
//! Cells run one after another on a pool with a fixed thread count; each
//! time is the median of three runs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use serde::Serialize;

use crate::driver::{approx_kmv, ApproxConfig};
use crate::error::{Error, Result};
use crate::kernel::{exact_matvec, KernelProblem, RealVector, DEFAULT_ORACLE_CAP};
use crate::lightsampler::BudgetRule;
use crate::rng::{self, tag};
use crate::synth::{clustered_problem, rademacher, SynthSpec};

const TIMING_RUNS: usize = 3;
/// Rows recomputed exactly to estimate the error above the oracle cap.
pub const SAMPLED_ORACLE_ROWS: usize = 64;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub sigma: f64,
    pub generator: SynthSpec,
    pub approx: ApproxConfig,
    pub threads: usize,
    /// Above this `n` the error comes from sampled rows.
    pub oracle_cap: usize,
}

impl BenchConfig {
    pub fn new(sizes: Vec<usize>, d: usize, eps: f64, seed: u64) -> Self {
        let mut approx = ApproxConfig::new(eps, seed);
        approx.budget = BudgetRule::IndexLight;
        Self {
            sizes,
            d,
            sigma: 1.0,
            generator: SynthSpec::tight(),
            approx,
            threads: 1,
            oracle_cap: DEFAULT_ORACLE_CAP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Dense,
    SampledRows,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub exact_seconds: f64,
    pub approx_seconds: f64,
    /// `exact_seconds / approx_seconds`.
    pub ratio: f64,
    /// `‖Kx - y‖₂ / ‖x‖₂`.
    pub relative_error: f64,
    pub oracle: OracleKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub exact_slope: Option<f64>,
    pub approx_slope: Option<f64>,
    pub threads: usize,
    pub eps: f64,
    pub d: usize,
    pub budget: String,
    pub uniform_budget: bool,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>7} {:>12} {:>12} {:>8} {:>10}", "n", "exact_s", "approx_s", "ratio", "err/|x|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7} {:>12.5} {:>12.5} {:>8.3} {:>10.2e}",
                r.n, r.exact_seconds, r.approx_seconds, r.ratio, r.relative_error
            );
        }
        let fmt = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            out,
            "slope exact {} approx {} (threads {}, eps {}, budget {}{})",
            fmt(self.exact_slope),
            fmt(self.approx_slope),
            self.threads,
            self.eps,
            self.budget,
            if self.uniform_budget { ", uniform" } else { "" }
        );
        out
    }
}

/// Least-squares slope of `log y` against `log x`; `None` below two points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

fn timed<T>(mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut times = Vec::with_capacity(TIMING_RUNS);
    let mut last = None;
    for _ in 0..TIMING_RUNS {
        let start = Instant::now();
        let out = f()?;
        times.push(start.elapsed().as_secs_f64().max(1e-9));
        last = Some(out);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[TIMING_RUNS / 2], last.expect("at least one run")))
}

/// `‖Kx - y‖₂` from `SAMPLED_ORACLE_ROWS` uniformly chosen rows, rescaled so
/// the squared error is unbiased.
fn sampled_error(problem: &KernelProblem, x: &RealVector, y: &RealVector, seed: u64) -> f64 {
    let rows = problem.rows();
    let m = SAMPLED_ORACLE_ROWS.min(rows);
    let mut rng = rng::stream(seed, &[tag::BENCH, rows as u64]);
    let picked = sample(&mut rng, rows, m);
    let sq: f64 = picked
        .iter()
        .map(|i| {
            let exact: f64 = (0..problem.n()).map(|j| problem.entry(i, j) * x[j]).sum();
            (exact - y[i]).powi(2)
        })
        .sum();
    (sq * rows as f64 / m as f64).sqrt()
}

fn cell(cfg: &BenchConfig, n: usize) -> Result<BenchRow> {
    let seed = rng::derive_seed(cfg.approx.seed, &[tag::BENCH, n as u64]);
    let problem = clustered_problem(n, cfg.d, cfg.sigma, &cfg.generator, seed)?;
    let x = rademacher(n, seed);
    let (exact_seconds, exact) = timed(|| exact_matvec(&problem, &x))?;
    let (approx_seconds, approx) = timed(|| approx_kmv(&problem, &x, &cfg.approx))?;
    let (error, oracle) = if n <= cfg.oracle_cap {
        (exact.distance(&approx), OracleKind::Dense)
    } else {
        (sampled_error(&problem, &x, &approx, seed), OracleKind::SampledRows)
    };
    Ok(BenchRow {
        n,
        exact_seconds,
        approx_seconds,
        ratio: exact_seconds / approx_seconds,
        relative_error: error / x.norm(),
        oracle,
    })
}

/// Times both products on one seeded clustered instance per size with a
/// Rademacher vector.
pub fn run_scaling_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() {
        return Err(Error::Empty("bench sizes"));
    }
    if cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("bench sizes must be strictly ascending".into()));
    }
    cfg.approx.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    let rows = pool.install(|| cfg.sizes.iter().map(|&n| cell(cfg, n)).collect::<Result<Vec<_>>>())?;
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let exact: Vec<f64> = rows.iter().map(|r| r.exact_seconds).collect();
    let approx: Vec<f64> = rows.iter().map(|r| r.approx_seconds).collect();
    Ok(BenchReport {
        exact_slope: loglog_slope(&ns, &exact),
        approx_slope: loglog_slope(&ns, &approx),
        rows,
        threads: cfg.threads.max(1),
        eps: cfg.approx.eps,
        d: cfg.d,
        budget: format!("{:?}", cfg.approx.budget),
        uniform_budget: cfg.approx.uniform_budget,
    })
}
