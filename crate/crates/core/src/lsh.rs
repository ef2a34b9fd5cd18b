//! Euclidean LSH and heavy-key recovery.
//!
//! The family concatenates `k` random-projection quantizers
//! `h(p) = ⌊(a·p + b) / w⌋` with `a ~ N(0, I)` and `b ~ U[0, w)`. For one
//! quantizer and points at distance `r`, with `u = w / r`,
//!
//! ```text
//! p(r) = 1 - 2Φ(-u) - (2 / (√(2π) u)) (1 - exp(-u² / 2)),
//! ```
//!
//! and the concatenation collides with probability `p(r)^k`. `(k, w)` are
//! chosen so that the collision probability at `r_near = sqrt(2σ²α ln n)`,
//! the distance where the kernel equals `n^-α`, is `n^{-0.9α}`. With
//! `T = ⌈10 n^α ln n⌉` independent tables a heavy key is missed with
//! probability at most `(1 - n^-α)^T ≤ n^-10`.
//!
//! Every candidate is verified exactly, so the returned heavy sets never
//! contain a light key. Light candidates are kept with their inclusion
//! probability so callers can form Horvitz-Thompson estimates over them.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_param, Error, Result};
use crate::kernel::{sq_dist, KernelProblem, PointSet};
use crate::rng::{self, tag};

/// Multiplier in `T = ⌈factor · n^α · ln n⌉`.
pub const DEFAULT_TABLE_FACTOR: f64 = 10.0;
/// Below this many keys heavy sets are found by a full scan.
pub const DEFAULT_BRUTE_FORCE_CUTOFF: usize = 256;
/// Largest concatenation width tried during calibration.
pub const MAX_CONCAT: usize = 16;
/// Queries whose buckets are gathered together, table by table.
const QUERY_BLOCK: usize = 256;
/// Target number of query blocks per search.
const MERGE_BLOCKS: usize = 16;
/// Exponent fraction of the near-collision target `n^{-0.9α}`.
const NEAR_TARGET_FRACTION: f64 = 0.9;
/// Calibration prefers the smallest `k` whose expected number of tables
/// colliding with a key at `FAR_MULTIPLE · r_near` is at most `FAR_BUDGET`.
const FAR_MULTIPLE: f64 = 4.0;
const FAR_BUDGET: f64 = 0.5;

/// `Φ(z)` for the standard normal.
fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Collision probability of one quantizer of width `w` at distance `r`.
pub fn quantizer_collision_probability(r: f64, w: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    let u = w / r;
    let p = 1.0 - 2.0 * normal_cdf(-u) - 2.0 / ((2.0 * PI).sqrt() * u) * (1.0 - (-u * u / 2.0).exp());
    p.clamp(0.0, 1.0)
}

/// Width ratio `u = w / r` at which one quantizer collides with probability
/// `target`. `p` is increasing in `u`.
fn solve_width_ratio(target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-9_f64, 1.0_f64);
    while quantizer_collision_probability(1.0, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if quantizer_collision_probability(1.0, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Clone, Debug, PartialEq)]
pub struct LshFamilyConfig {
    pub n: usize,
    pub dim: usize,
    pub alpha: f64,
    /// Distance at which the kernel equals `n^-α`.
    pub r_near: f64,
    /// Number of concatenated quantizers; 0 hashes everything to one bucket.
    pub concat_width: usize,
    pub cell_width: f64,
    pub n_tables: usize,
    pub seed: u64,
}

impl LshFamilyConfig {
    /// Heaviness threshold `n^-α`.
    pub fn threshold(&self) -> f64 {
        (self.n as f64).powf(-self.alpha)
    }

    /// Probability that two points at distance `r` share a bucket in one table.
    pub fn collision_probability(&self, r: f64) -> f64 {
        if self.concat_width == 0 {
            return 1.0;
        }
        quantizer_collision_probability(r, self.cell_width).powi(self.concat_width as i32)
    }

    /// Probability that two points at distance `r` share a bucket in at least
    /// one of the tables.
    pub fn inclusion_probability(&self, r: f64) -> f64 {
        let p = self.collision_probability(r);
        if p >= 1.0 {
            return 1.0;
        }
        -(self.n_tables as f64 * (-p).ln_1p()).exp_m1()
    }
}

/// Chooses `(k, w)` for `n` keys in dimension `d` with bandwidth `sigma`.
pub fn calibrate_family(n: usize, dim: usize, sigma: f64, alpha: f64, seed: u64) -> Result<LshFamilyConfig> {
    calibrate_family_with(n, dim, sigma, alpha, seed, DEFAULT_TABLE_FACTOR)
}

pub fn calibrate_family_with(
    n: usize,
    dim: usize,
    sigma: f64,
    alpha: f64,
    seed: u64,
    table_factor: f64,
) -> Result<LshFamilyConfig> {
    if n < 2 {
        return Err(Error::Infeasible(format!("LSH needs at least 2 keys, got {n}")));
    }
    if n > u32::MAX as usize {
        return Err(Error::Infeasible(format!("n = {n} exceeds u32 key ids")));
    }
    check_param("alpha", alpha, alpha > 0.0 && alpha <= 1.0, "must lie in (0, 1]")?;
    check_param("sigma", sigma, sigma.is_finite() && sigma > 0.0, "must be positive")?;
    check_param(
        "table_factor",
        table_factor,
        table_factor.is_finite() && table_factor > 0.0,
        "must be positive",
    )?;
    let nf = n as f64;
    let r_near = (2.0 * sigma * sigma * alpha * nf.ln()).sqrt();
    let n_tables = (table_factor * nf.powf(alpha) * nf.ln()).ceil().max(1.0) as usize;
    let mut cfg = LshFamilyConfig {
        n,
        dim,
        alpha,
        r_near,
        concat_width: 0,
        cell_width: f64::INFINITY,
        n_tables,
        seed,
    };
    if nf.powf(-alpha) > 1.0 - 1e-9 {
        return Ok(cfg);
    }

    let target = nf.powf(-NEAR_TARGET_FRACTION * alpha);
    let (k, w) = choose_projection(r_near, target, n_tables).ok_or_else(|| {
        Error::Infeasible(format!("no cell width reaches collision target {target} at r = {r_near}"))
    })?;
    cfg.concat_width = k;
    cfg.cell_width = w;
    Ok(cfg)
}

/// Picks `(k, w)` so that one table collides at distance `r` with
/// probability `target`, preferring the smallest `k` whose expected number of
/// colliding tables at `FAR_MULTIPLE · r` is within `FAR_BUDGET`.
pub(crate) fn choose_projection(r: f64, target: f64, n_tables: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for k in 1..=MAX_CONCAT {
        let w = solve_width_ratio(target.powf(1.0 / k as f64)) * r;
        if !w.is_finite() || w <= 0.0 {
            continue;
        }
        let far = n_tables as f64 * quantizer_collision_probability(FAR_MULTIPLE * r, w).powi(k as i32);
        if far <= FAR_BUDGET {
            return Some((k, w));
        }
        if best.is_none_or(|(_, _, f)| far < f) {
            best = Some((k, w, far));
        }
    }
    best.map(|(k, w, _)| (k, w))
}

/// One table: `k` projections and a sorted `(code, id)` index.
#[derive(Clone, Debug, PartialEq)]
struct Table {
    projections: Vec<f64>,
    offsets: Vec<f64>,
    codes: Vec<u64>,
    ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashTables {
    cfg: LshFamilyConfig,
    tables: Vec<Table>,
}

#[inline]
fn mix(h: u64, v: i64) -> u64 {
    let mut z = (h ^ (v as u64)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Table {
    fn draw(cfg: &LshFamilyConfig, t: usize) -> Self {
        let mut rng = rng::stream(cfg.seed, &[tag::LSH, t as u64]);
        let k = cfg.concat_width;
        let projections = (0..k * cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let offsets = (0..k).map(|_| rng.random::<f64>() * cfg.cell_width).collect();
        Self {
            projections,
            offsets,
            codes: Vec::new(),
            ids: Vec::new(),
        }
    }

    #[inline]
    fn code(&self, p: &[f64], w: f64) -> u64 {
        let d = p.len();
        let mut h = 0u64;
        for (a, b) in self.projections.chunks_exact(d).zip(&self.offsets) {
            let proj: f64 = a.iter().zip(p).map(|(x, y)| x * y).sum();
            h = mix(h, ((proj + b) / w).floor() as i64);
        }
        h
    }

    /// Calls `f(slot, ids)` for every query code in `sorted` that has a
    /// bucket here.
    fn merge(&self, sorted: &[(u64, u32)], mut f: impl FnMut(u32, &[u32])) {
        let mut lo = 0;
        let mut prev: Option<(u64, usize, usize)> = None;
        for &(code, slot) in sorted {
            if let Some((c, a, b)) = prev {
                if c == code {
                    f(slot, &self.ids[a..b]);
                    continue;
                }
            }
            lo += self.codes[lo..].partition_point(|&c| c < code);
            let hi = lo + self.codes[lo..].partition_point(|&c| c == code);
            prev = Some((code, lo, hi));
            if hi > lo {
                f(slot, &self.ids[lo..hi]);
            }
            lo = hi;
        }
    }

    fn bucket(&self, code: u64) -> &[u32] {
        let lo = self.codes.partition_point(|&c| c < code);
        let hi = lo + self.codes[lo..].partition_point(|&c| c == code);
        &self.ids[lo..hi]
    }
}

impl HashTables {
    pub fn config(&self) -> &LshFamilyConfig {
        &self.cfg
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    /// Code of `p` in table `t`.
    pub fn hash(&self, t: usize, p: &[f64]) -> u64 {
        self.tables[t].code(p, self.cfg.cell_width)
    }

    /// Key ids sharing `code` in table `t`, ascending.
    pub fn bucket(&self, t: usize, code: u64) -> &[u32] {
        self.tables[t].bucket(code)
    }

    /// Number of distinct buckets in table `t`.
    pub fn bucket_count(&self, t: usize) -> usize {
        let codes = &self.tables[t].codes;
        codes.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!codes.is_empty())
    }
}

/// Hashes every key into each of the configured tables. Deterministic in
/// the configuration's seed.
pub fn build_tables(keys: &PointSet, cfg: &LshFamilyConfig) -> Result<HashTables> {
    if keys.dim() != cfg.dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim,
            found: keys.dim(),
        });
    }
    if keys.n() > u32::MAX as usize {
        return Err(Error::Infeasible(format!("n = {} exceeds u32 key ids", keys.n())));
    }
    let tables = (0..cfg.n_tables)
        .into_par_iter()
        .map(|t| {
            let mut table = Table::draw(cfg, t);
            let mut entries: Vec<(u64, u32)> = keys
                .iter()
                .enumerate()
                .map(|(j, p)| (table.code(p, cfg.cell_width), j as u32))
                .collect();
            entries.sort_unstable();
            table.codes = entries.iter().map(|e| e.0).collect();
            table.ids = entries.iter().map(|e| e.1).collect();
            table
        })
        .collect();
    Ok(HashTables {
        cfg: cfg.clone(),
        tables,
    })
}

/// A verified non-heavy candidate: its kernel value and the probability it
/// was found.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightCandidate {
    pub index: u32,
    pub kernel: f64,
    pub inclusion: f64,
}

/// Per-query heavy sets `S_i = {j : k(q_i, k_j) ≥ n^-α}` with their kernel
/// values, and the light candidates met on the way.
#[derive(Clone, Debug, PartialEq)]
pub struct HeavyIndex {
    pub threshold: f64,
    /// Sorted ascending per row.
    pub sets: Vec<Vec<usize>>,
    /// `heavy_values[i][s] = k(q_i, k_{sets[i][s]})`.
    pub heavy_values: Vec<Vec<f64>>,
    /// Sorted by index per row.
    pub light: Vec<Vec<LightCandidate>>,
    /// Distinct candidates verified, summed over rows.
    pub candidates_scanned: usize,
}

impl HeavyIndex {
    pub fn rows(&self) -> usize {
        self.sets.len()
    }

    pub fn total_heavy(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

fn finish_row(
    problem: &KernelProblem,
    i: usize,
    mut candidates: Vec<u32>,
    threshold: f64,
    inclusion: impl Fn(f64) -> f64,
) -> (Vec<usize>, Vec<f64>, Vec<LightCandidate>, usize) {
    candidates.sort_unstable();
    let kernel = problem.kernel();
    let q = problem.queries().point(i);
    let mut set = Vec::new();
    let mut values = Vec::new();
    let mut light = Vec::new();
    for &j in &candidates {
        let d2 = sq_dist(q, problem.keys().point(j as usize));
        let v = kernel.from_sq_dist(d2);
        if v >= threshold {
            set.push(j as usize);
            values.push(v);
        } else if v > 0.0 {
            light.push(LightCandidate {
                index: j,
                kernel: v,
                inclusion: inclusion(d2.sqrt()),
            });
        }
    }
    (set, values, light, candidates.len())
}

fn assemble(threshold: f64, rows: Vec<(Vec<usize>, Vec<f64>, Vec<LightCandidate>, usize)>) -> HeavyIndex {
    let mut index = HeavyIndex {
        threshold,
        sets: Vec::with_capacity(rows.len()),
        heavy_values: Vec::with_capacity(rows.len()),
        light: Vec::with_capacity(rows.len()),
        candidates_scanned: 0,
    };
    for (s, v, l, c) in rows {
        index.sets.push(s);
        index.heavy_values.push(v);
        index.light.push(l);
        index.candidates_scanned += c;
    }
    index
}

/// Scans each query's buckets across all tables, deduplicates the union and
/// keeps the keys whose exact kernel value reaches `n^-α`.
pub fn find_heavy(problem: &KernelProblem, tables: &HashTables, cfg: &LshFamilyConfig) -> Result<HeavyIndex> {
    if problem.n() != cfg.n || problem.dim() != cfg.dim {
        return Err(Error::Precondition(
            "hash tables were built for a different key set".into(),
        ));
    }
    let n = problem.n();
    let threshold = cfg.threshold();
    let rows: Vec<usize> = (0..problem.rows()).collect();
    // Each table is walked once per block by merging the block's sorted
    // codes against the table's sorted codes, so lookups are sequential.
    // Blocks grow with `n` to keep the merges linear in total.
    let block_len = QUERY_BLOCK.max(rows.len().div_ceil(MERGE_BLOCKS));
    let rows = rows
        .par_chunks(block_len)
        .map_init(
            || (vec![u32::MAX; n], 0u32),
            |(stamp, gen), block| {
                let mut raw: Vec<Vec<u32>> = vec![Vec::new(); block.len()];
                let mut codes: Vec<(u64, u32)> = Vec::with_capacity(block.len());
                for t in 0..tables.n_tables() {
                    codes.clear();
                    codes.extend(
                        block
                            .iter()
                            .enumerate()
                            .map(|(slot, &i)| (tables.hash(t, problem.queries().point(i)), slot as u32)),
                    );
                    codes.sort_unstable();
                    tables.tables[t].merge(&codes, |slot, ids| raw[slot as usize].extend_from_slice(ids));
                }
                block
                    .iter()
                    .zip(raw)
                    .map(|(&i, raw)| {
                        *gen = gen.wrapping_add(1);
                        if *gen == u32::MAX {
                            stamp.fill(0);
                            *gen = 1;
                        }
                        let mut candidates = Vec::new();
                        for j in raw {
                            let s = &mut stamp[j as usize];
                            if *s != *gen {
                                *s = *gen;
                                candidates.push(j);
                            }
                        }
                        finish_row(problem, i, candidates, threshold, |r| cfg.inclusion_probability(r))
                    })
                    .collect::<Vec<_>>()
            },
        )
        .flatten()
        .collect();
    Ok(assemble(threshold, rows))
}

/// Heavy sets by a full scan; every key is a candidate with inclusion 1.
pub fn find_heavy_brute_force(problem: &KernelProblem, alpha: f64) -> Result<HeavyIndex> {
    check_param("alpha", alpha, alpha > 0.0 && alpha <= 1.0, "must lie in (0, 1]")?;
    let n = problem.n();
    let threshold = (n as f64).powf(-alpha);
    let all: Vec<u32> = (0..n as u32).collect();
    let rows = (0..problem.rows())
        .into_par_iter()
        .map(|i| finish_row(problem, i, all.clone(), threshold, |_| 1.0))
        .collect();
    Ok(assemble(threshold, rows))
}

/// How heavy keys are located.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeavySearch {
    /// Hash tables above the brute-force cutoff, full scan below it.
    Lsh { brute_force_cutoff: usize },
    BruteForce,
}

impl Default for HeavySearch {
    fn default() -> Self {
        HeavySearch::Lsh {
            brute_force_cutoff: DEFAULT_BRUTE_FORCE_CUTOFF,
        }
    }
}

/// Builds whatever structure `search` calls for and returns the heavy sets.
pub fn heavy_index(
    problem: &KernelProblem,
    alpha: f64,
    seed: u64,
    search: HeavySearch,
    table_factor: f64,
) -> Result<HeavyIndex> {
    match search {
        HeavySearch::Lsh { brute_force_cutoff } if problem.n() >= brute_force_cutoff.max(2) => {
            let cfg = calibrate_family_with(
                problem.n(),
                problem.dim(),
                problem.kernel().sigma(),
                alpha,
                seed,
                table_factor,
            )?;
            let tables = build_tables(problem.keys(), &cfg)?;
            find_heavy(problem, &tables, &cfg)
        }
        _ => find_heavy_brute_force(problem, alpha),
    }
}
