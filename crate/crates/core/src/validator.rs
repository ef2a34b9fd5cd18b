//! Empirical checks of the head/tail mass assumption.
//!
//! For a prefix length `i`, `a_i` is the sum of the `i` largest entries of
//! `K[:i, :i]` and the ratio is `(‖K[:i, :i]‖₁ - a_i) / a_i`; the assumption
//! holds with constant `c` when every ratio is at most `c`. Order statistics
//! compare the `n`-th largest entry of `K` with the `2n`-th and `(n+1)`-th.
//!
//! All sums use fixed orders (head descending, totals row-major) so results
//! are reproducible bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::{entry_order, materialize_with_cap, KernelProblem, Matrix};

/// Smallest prefix evaluated by default.
pub const DEFAULT_MIN_PREFIX: usize = 50;
/// Above this size entries are streamed instead of materialized.
pub const STREAMING_THRESHOLD: usize = 2048;

/// A ratio that may be infinite; serialized as a number or `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio(pub f64);

impl Ratio {
    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrderStats {
    /// `n`-th largest over `2n`-th largest.
    pub r_2n: Ratio,
    /// `n`-th largest over `(n+1)`-th largest.
    pub r_n1: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub max_ratio: Ratio,
    pub per_prefix: Vec<(usize, Ratio)>,
    pub order_stats: OrderStats,
    /// `(length, mean ratio, population standard deviation)`.
    pub c_curve: Vec<(usize, f64, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixRatios {
    pub per_prefix: Vec<(usize, f64)>,
    pub max_ratio: f64,
    pub warnings: Vec<String>,
}

type Entry = (f64, usize, usize);

/// Heap element whose `Ord` puts the entry that ranks last on top.
#[derive(Clone, Copy, PartialEq)]
struct Ranked(Entry);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        entry_order(self.0, other.0)
    }
}

/// `(tail - head) / head` convention: zero when the whole prefix is zero.
fn ratio(total: f64, head: f64) -> f64 {
    if head > 0.0 {
        (total - head).max(0.0) / head
    } else {
        0.0
    }
}

/// `(a_i, total)` of a materialized matrix's leading `i × i` block.
fn prefix_sums_dense(k: &Matrix, i: usize, buf: &mut Vec<Entry>) -> (f64, f64) {
    buf.clear();
    let mut total = 0.0;
    for r in 0..i {
        for (c, &v) in k.row(r)[..i].iter().enumerate() {
            total += v;
            buf.push((v, r, c));
        }
    }
    if i < buf.len() {
        buf.select_nth_unstable_by(i - 1, |a, b| entry_order(*a, *b));
        buf.truncate(i);
    }
    buf.sort_unstable_by(|a, b| entry_order(*a, *b));
    (buf.iter().map(|e| e.0).sum(), total)
}

/// The `t` top-ranked entries of `K[:i, :i]`, sorted, plus the row-major
/// total, computed without materializing.
fn stream_top(problem: &KernelProblem, i: usize, t: usize) -> (Vec<Entry>, f64) {
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(t + 1);
    let mut total = 0.0;
    for r in 0..i {
        for c in 0..i {
            let v = problem.entry(r, c);
            total += v;
            let e = Ranked((v, r, c));
            if heap.len() < t {
                heap.push(e);
            } else if let Some(top) = heap.peek() {
                if e < *top {
                    heap.pop();
                    heap.push(e);
                }
            }
        }
    }
    let mut top: Vec<Entry> = heap.into_iter().map(|e| e.0).collect();
    top.sort_unstable_by(|a, b| entry_order(*a, *b));
    (top, total)
}

fn check_square(problem: &KernelProblem) -> Result<usize> {
    if !problem.is_square() {
        return Err(Error::Precondition("validator needs as many queries as keys".into()));
    }
    Ok(problem.n())
}

/// Prefix ratios of a square dense matrix.
pub fn prefix_ratios_matrix(k: &Matrix, lengths: &[usize]) -> Result<Vec<(usize, f64)>> {
    if k.rows() != k.cols() {
        return Err(Error::Precondition("prefix ratios need a square matrix".into()));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > k.rows()) {
        return Err(Error::OutOfRange { t: bad, max: k.rows() });
    }
    Ok(lengths
        .par_iter()
        .map_init(Vec::new, |buf, &i| {
            let (head, total) = prefix_sums_dense(k, i, buf);
            (i, ratio(total, head))
        })
        .collect())
}

/// Prefix lengths `min_prefix, min_prefix + step, ...` with `n` always last.
pub fn prefix_lengths(n: usize, min_prefix: usize, step: usize) -> Vec<usize> {
    let step = step.max(1);
    let start = min_prefix.clamp(1, n);
    let mut v: Vec<usize> = (start..=n).step_by(step).collect();
    if v.last() != Some(&n) {
        v.push(n);
    }
    v
}

/// Ratios for each listed prefix length.
pub fn prefix_ratios(problem: &KernelProblem, lengths: &[usize]) -> Result<Vec<(usize, f64)>> {
    let n = check_square(problem)?;
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::OutOfRange { t: bad, max: n });
    }
    if n <= STREAMING_THRESHOLD {
        prefix_ratios_matrix(&materialize_with_cap(problem, STREAMING_THRESHOLD)?, lengths)
    } else {
        Ok(lengths
            .par_iter()
            .map(|&i| {
                let (top, total) = stream_top(problem, i, i);
                (i, ratio(total, top.iter().map(|e| e.0).sum()))
            })
            .collect())
    }
}

/// Ratios for every prefix from `min_prefix` to `n` in steps of `step`; the
/// maximum estimates the assumption constant.
pub fn head_tail_max_ratio_stepped(problem: &KernelProblem, min_prefix: usize, step: usize) -> Result<PrefixRatios> {
    let n = check_square(problem)?;
    let mut warnings = Vec::new();
    if n < min_prefix {
        warnings.push(format!("n = {n} is below the minimum prefix {min_prefix}; evaluated prefix {n} only"));
    }
    let per_prefix = prefix_ratios(problem, &prefix_lengths(n, min_prefix, step))?;
    let max_ratio = per_prefix.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(PrefixRatios {
        per_prefix,
        max_ratio,
        warnings,
    })
}

/// Every prefix from `min_prefix` to `n`.
pub fn head_tail_max_ratio(problem: &KernelProblem, min_prefix: usize) -> Result<PrefixRatios> {
    head_tail_max_ratio_stepped(problem, min_prefix, 1)
}

fn quotient(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// `(n-th / 2n-th, n-th / (n+1)-th)` largest entries of `K`.
pub fn order_stat_ratios(problem: &KernelProblem) -> Result<OrderStats> {
    let n = check_square(problem)?;
    if n < 2 {
        return Err(Error::Precondition("order statistics need n ≥ 2".into()));
    }
    if n <= STREAMING_THRESHOLD {
        return order_stat_ratios_matrix(&materialize_with_cap(problem, STREAMING_THRESHOLD)?);
    }
    Ok(order_stats_from_sorted(&stream_top(problem, n, 2 * n).0, n))
}

fn order_stats_from_sorted(top: &[Entry], n: usize) -> OrderStats {
    let nth = top[n - 1].0;
    OrderStats {
        r_2n: Ratio(quotient(nth, top[2 * n - 1].0)),
        r_n1: Ratio(quotient(nth, top[n].0)),
    }
}

/// Order-statistic ratios of a square dense matrix.
pub fn order_stat_ratios_matrix(k: &Matrix) -> Result<OrderStats> {
    let n = k.rows();
    if k.cols() != n || n < 2 {
        return Err(Error::Precondition("order statistics need a square matrix with n ≥ 2".into()));
    }
    let mut all: Vec<Entry> = (0..n)
        .flat_map(|r| k.row(r).iter().enumerate().map(move |(c, &v)| (v, r, c)))
        .collect();
    if 2 * n < all.len() {
        all.select_nth_unstable_by(2 * n - 1, |a, b| entry_order(*a, *b));
        all.truncate(2 * n);
    }
    all.sort_unstable_by(|a, b| entry_order(*a, *b));
    Ok(order_stats_from_sorted(&all, n))
}

/// Mean and population standard deviation of the prefix ratio at each
/// length across instances.
pub fn c_scaling_profile(problems: &[KernelProblem], lengths: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
    if problems.is_empty() {
        return Err(Error::Empty("instance list"));
    }
    let per_instance: Vec<Vec<(usize, f64)>> = problems
        .iter()
        .map(|p| prefix_ratios(p, lengths))
        .collect::<Result<_>>()?;
    let m = problems.len() as f64;
    Ok(lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| {
            let vals: Vec<f64> = per_instance.iter().map(|r| r[k].1).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            (len, mean, var.sqrt())
        })
        .collect())
}

/// Settings for [`validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidateOptions {
    pub min_prefix: usize,
    pub prefix_step: usize,
    pub curve_step: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            min_prefix: DEFAULT_MIN_PREFIX,
            prefix_step: 1,
            curve_step: 50,
        }
    }
}

/// Full report for one instance.
pub fn validate(problem: &KernelProblem, opts: ValidateOptions) -> Result<ValidationReport> {
    let n = check_square(problem)?;
    let prefixes = head_tail_max_ratio_stepped(problem, opts.min_prefix, opts.prefix_step)?;
    let order_stats = order_stat_ratios(problem)?;
    let lengths = prefix_lengths(n, opts.min_prefix, opts.curve_step);
    let c_curve = c_scaling_profile(std::slice::from_ref(problem), &lengths)?;
    Ok(ValidationReport {
        max_ratio: Ratio(prefixes.max_ratio),
        per_prefix: prefixes.per_prefix.into_iter().map(|(i, r)| (i, Ratio(r))).collect(),
        order_stats,
        c_curve,
        warnings: prefixes.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{materialize, sum_top_t, GaussianKernel, PointSet};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn problem_from(rows: &[Vec<f64>], sigma: f64) -> KernelProblem {
        let pts = PointSet::from_rows(rows).unwrap();
        KernelProblem::new(pts.clone(), pts, GaussianKernel::new(sigma).unwrap()).unwrap()
    }

    /// Full-sort oracle for one prefix.
    fn brute_ratio(k: &Matrix, i: usize) -> f64 {
        let sub = k.prefix(i, i);
        let mut all: Vec<Entry> = (0..i)
            .flat_map(|r| (0..i).map(move |c| (r, c)))
            .map(|(r, c)| (sub.get(r, c), r, c))
            .collect();
        all.sort_by(|a, b| entry_order(*a, *b));
        let head: f64 = all[..i].iter().map(|e| e.0).sum();
        ratio(sub.sum(), head)
    }

    #[test]
    fn identical_points_are_worst_case() {
        let p = problem_from(&vec![vec![1.0, 2.0]; 60], 1.0);
        let r = head_tail_max_ratio(&p, 50).unwrap();
        assert_eq!(r.max_ratio, 59.0);
        assert_eq!(r.per_prefix.first(), Some(&(50, 49.0)));
        let os = order_stat_ratios(&p).unwrap();
        assert_eq!((os.r_2n.0, os.r_n1.0), (1.0, 1.0));
    }

    #[test]
    fn separated_points_have_zero_tail() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![100.0 * i as f64]).collect();
        let p = problem_from(&rows, 1.0);
        let r = head_tail_max_ratio(&p, 50).unwrap();
        assert_eq!(r.max_ratio, 0.0);
        let os = order_stat_ratios(&p).unwrap();
        assert!(os.r_2n.is_infinite() && os.r_n1.is_infinite());
    }

    #[test]
    fn small_n_warns_and_uses_n() {
        let p = problem_from(&[vec![0.0], vec![(2.0 * 2f64.ln()).sqrt()]], 1.0);
        let r = head_tail_max_ratio(&p, 50).unwrap();
        assert_eq!(r.per_prefix.len(), 1);
        assert_eq!(r.per_prefix[0].0, 2);
        assert!((r.max_ratio - 0.5).abs() < 1e-15);
        assert_eq!(r.warnings.len(), 1);
        let (head, tail) = sum_top_t(&materialize(&p).unwrap(), 2).unwrap();
        assert_eq!(r.max_ratio, tail / head);
    }

    #[test]
    fn planted_matrix_examples() {
        let k = Matrix::from_rows(&[[1.0, 0.5], [1.0, 0.5]]).unwrap();
        assert_eq!(prefix_ratios_matrix(&k, &[2]).unwrap(), vec![(2, 0.5)]);
        let k = Matrix::from_rows(&[[1.0, 0.8], [0.8, 0.04]]).unwrap();
        let os = order_stat_ratios_matrix(&k).unwrap();
        assert_eq!(os.r_2n.0, 0.8 / 0.04);
        assert!((os.r_2n.0 - 20.0).abs() < 1e-12);
        assert_eq!(os.r_n1.0, 1.0);
        let k = Matrix::from_rows(&[[1.0, 0.8], [0.8, 0.0]]).unwrap();
        assert!(order_stat_ratios_matrix(&k).unwrap().r_2n.is_infinite());
        let k = Matrix::from_rows(&[[0.3; 3]; 3]).unwrap();
        let os = order_stat_ratios_matrix(&k).unwrap();
        assert_eq!((os.r_2n.0, os.r_n1.0), (1.0, 1.0));
    }

    #[test]
    fn json_schema() {
        let far: Vec<Vec<f64>> = (0..4).map(|i| vec![1e3 * i as f64]).collect();
        let rep = validate(&problem_from(&far, 1.0), ValidateOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        for k in ["max_ratio", "per_prefix", "order_stats", "c_curve"] {
            assert!(keys.contains(&k), "{k} missing");
        }
        assert_eq!(v["order_stats"]["r_2n"], "inf");
        assert_eq!(v["max_ratio"], 0.0);
        assert_eq!(v["per_prefix"][0], serde_json::json!([4, 0.0]));
        assert_eq!(v["c_curve"][0], serde_json::json!([4, 0.0, 0.0]));
    }

    #[test]
    fn c_curve_single_and_identical() {
        let p = problem_from(&vec![vec![0.0]; 200], 1.0);
        let curve = c_scaling_profile(&[p.clone(), p], &[50, 100, 150]).unwrap();
        assert_eq!(curve, vec![(50, 49.0, 0.0), (100, 99.0, 0.0), (150, 149.0, 0.0)]);
        assert!(c_scaling_profile(&[], &[1]).is_err());
    }

    #[test]
    fn streaming_matches_dense() {
        let mut rng = rng::stream(3, &[]);
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let p = problem_from(&rows, 0.7);
        let k = materialize(&p).unwrap();
        let mut buf = Vec::new();
        for i in [1, 7, 50, 120] {
            let (head, total) = prefix_sums_dense(&k, i, &mut buf);
            let (top, stotal) = stream_top(&p, i, i);
            assert_eq!(total, stotal);
            assert_eq!(head, top.iter().map(|e| e.0).sum::<f64>());
        }
    }

    #[test]
    fn duplicate_query_does_not_shrink_mass() {
        let mut rng = rng::stream(4, &[]);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
        let keys = PointSet::from_rows(&rows).unwrap();
        let kernel = GaussianKernel::new(1.0).unwrap();
        let base = KernelProblem::new(keys.clone(), keys.clone(), kernel).unwrap();
        let mut qrows = rows.clone();
        qrows.push(rows[3].clone());
        let more = KernelProblem::new(PointSet::from_rows(&qrows).unwrap(), keys, kernel).unwrap();
        assert!(materialize(&more).unwrap().sum() >= materialize(&base).unwrap().sum());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matches_full_sort(seed in 0u64..10_000, n in 2usize..90, sigma in 0.1f64..3.0) {
            let mut rng = rng::stream(seed, &[]);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let p = problem_from(&rows, sigma);
            let k = materialize(&p).unwrap();
            let r = head_tail_max_ratio(&p, 1).unwrap();
            for &(i, v) in &r.per_prefix {
                prop_assert_eq!(v, brute_ratio(&k, i));
                prop_assert!(v >= 0.0);
            }
        }
    }
}
