//! Seeded synthetic instances that satisfy the head/tail assumption.
//!
//! Points come in small clusters: each query sits in the cluster of the key
//! with the same index, so every row has `O(1)` heavy keys and `‖K‖₁ = O(n)`.
//! Distances are in units of the bandwidth `σ`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_param, Result};
use crate::kernel::{GaussianKernel, KernelProblem, Matrix, PointSet, RealVector};
use crate::reduction::AttentionInstance;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthKind {
    /// Well separated clusters; the light contribution is negligible.
    Tight,
    /// Clusters grouped in fours whose members see each other at kernel
    /// value about `sibling_kernel`, so light keys carry some mass.
    Halo { sibling_kernel: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub cluster_size: usize,
    /// Per-coordinate standard deviation of cluster (or group) centers.
    pub spread: f64,
    /// Per-coordinate standard deviation of members around their center.
    pub jitter: f64,
}

impl SynthSpec {
    pub fn tight() -> Self {
        Self {
            kind: SynthKind::Tight,
            cluster_size: 4,
            spread: 2.0,
            jitter: 0.15,
        }
    }

    pub fn halo(sibling_kernel: f64) -> Self {
        Self {
            kind: SynthKind::Halo { sibling_kernel },
            cluster_size: 4,
            spread: 2.0,
            jitter: 0.1,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::tight()
    }
}

fn gauss_vec(rng: &mut rng::StreamRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut rng::StreamRng, d: usize) -> Vec<f64> {
    let v = gauss_vec(rng, d, 1.0);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

/// Cluster center of every index, in units of `σ`.
fn centers(n: usize, d: usize, spec: &SynthSpec, rng: &mut rng::StreamRng) -> Result<Vec<Vec<f64>>> {
    check_param("cluster_size", spec.cluster_size as f64, spec.cluster_size >= 1, "must be positive")?;
    let size = spec.cluster_size;
    let mut out = Vec::with_capacity(n);
    match spec.kind {
        SynthKind::Tight => {
            while out.len() < n {
                let c = gauss_vec(rng, d, spec.spread);
                for _ in 0..size {
                    out.push(c.clone());
                }
            }
        }
        SynthKind::Halo { sibling_kernel } => {
            check_param(
                "sibling_kernel",
                sibling_kernel,
                sibling_kernel > 0.0 && sibling_kernel < 1.0,
                "must lie in (0, 1)",
            )?;
            // Siblings at C + r u_a, C + r u_b with near-orthogonal unit
            // vectors are about r√2 apart.
            let r = (-sibling_kernel.ln()).sqrt();
            while out.len() < n {
                let group = gauss_vec(rng, d, spec.spread * 4.0);
                for _ in 0..4 {
                    let u = unit_vec(rng, d);
                    let c: Vec<f64> = group.iter().zip(&u).map(|(g, v)| g + r * v).collect();
                    for _ in 0..size {
                        out.push(c.clone());
                    }
                }
            }
        }
    }
    out.truncate(n);
    Ok(out)
}

/// `n` keys and `n` queries in dimension `d` with bandwidth `sigma`.
pub fn clustered_problem(n: usize, d: usize, sigma: f64, spec: &SynthSpec, seed: u64) -> Result<KernelProblem> {
    let kernel = GaussianKernel::new(sigma)?;
    let mut rng = rng::stream(seed, &[tag::SYNTH]);
    let centers = centers(n, d, spec, &mut rng)?;
    let mut jittered = |c: &Vec<f64>| -> Vec<f64> {
        c.iter()
            .map(|v| sigma * (v + spec.jitter * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let keys: Vec<Vec<f64>> = centers.iter().map(&mut jittered).collect();
    let queries: Vec<Vec<f64>> = centers.iter().map(&mut jittered).collect();
    KernelProblem::new(PointSet::from_rows(&queries)?, PointSet::from_rows(&keys)?, kernel)
}

/// Uniform random signs.
pub fn rademacher(n: usize, seed: u64) -> RealVector {
    let mut rng = rng::stream(seed, &[tag::SYNTH, 1]);
    RealVector::from_vec_unchecked((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
}

/// Standard normal entries.
pub fn gaussian_vector(n: usize, seed: u64) -> RealVector {
    let mut rng = rng::stream(seed, &[tag::SYNTH, 2]);
    RealVector::from_vec_unchecked(gauss_vec(&mut rng, n, 1.0))
}

/// Embedding-like attention head: tokens in clusters of four sharing a
/// direction, all norms close to `norm`, one standard-normal value column.
pub fn embedding_attention(n: usize, d: usize, norm: f64, seed: u64) -> Result<AttentionInstance> {
    let mut rng = rng::stream(seed, &[tag::SYNTH, 3]);
    let mut keys = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    while keys.len() < n {
        let dir = unit_vec(&mut rng, d);
        for _ in 0..4 {
            for out in [&mut keys, &mut queries] {
                let noisy: Vec<f64> = dir.iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
                let len = noisy.iter().map(|a| a * a).sum::<f64>().sqrt();
                let scale = norm * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal)) / len;
                out.push(noisy.into_iter().map(|a| a * scale).collect::<Vec<f64>>());
            }
        }
    }
    keys.truncate(n);
    queries.truncate(n);
    let values = Matrix::new(n, 1, gauss_vec(&mut rng, n, 1.0))?;
    AttentionInstance::new(PointSet::from_rows(&queries)?, PointSet::from_rows(&keys)?, Some(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::materialize;

    #[test]
    fn tight_clusters_are_heavy_inside_and_negligible_outside() {
        let p = clustered_problem(256, 32, 1.3, &SynthSpec::tight(), 1).unwrap();
        let k = materialize(&p).unwrap();
        let thr = 256f64.powf(-1.0 / 3.0);
        for i in 0..256 {
            for j in 0..256 {
                if i / 4 == j / 4 {
                    assert!(k.get(i, j) >= thr);
                } else {
                    assert!(k.get(i, j) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn halo_siblings_sit_near_target() {
        let p = clustered_problem(256, 32, 1.0, &SynthSpec::halo(0.003), 2).unwrap();
        let k = materialize(&p).unwrap();
        let sib: Vec<f64> = (0..256)
            .flat_map(|i| (0..256).map(move |j| (i, j)))
            .filter(|&(i, j)| i / 16 == j / 16 && i / 4 != j / 4)
            .map(|(i, j)| k.get(i, j))
            .collect();
        let mean = sib.iter().sum::<f64>() / sib.len() as f64;
        assert!(mean > 0.0005 && mean < 0.01, "{mean}");
    }

    #[test]
    fn vectors_and_determinism() {
        let x = rademacher(100, 3);
        assert!(x.as_slice().iter().all(|v| v.abs() == 1.0));
        assert!(x.as_slice().iter().any(|&v| v < 0.0) && x.as_slice().iter().any(|&v| v > 0.0));
        assert_eq!(x, rademacher(100, 3));
        assert_ne!(gaussian_vector(10, 1), gaussian_vector(10, 2));
        let a = embedding_attention(64, 8, 4.0, 1).unwrap();
        for k in a.keys.iter() {
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 4.0).abs() < 0.2);
        }
    }
}
