//! Subquadratic approximate matrix-vector products for Gaussian kernel
//! matrices, an attention-to-kernel reduction, and empirical checks of the
//! head/tail mass assumption the approximation relies on.

pub mod bench;
pub mod driver;
pub mod error;
pub mod io;
pub mod kde;
pub mod kernel;
pub mod lightsampler;
pub mod lsh;
pub mod preprocess;
pub mod reduction;
pub mod rng;
pub mod synth;
pub mod validator;

pub use bench::{run_scaling_bench, BenchConfig, BenchReport};
pub use driver::{approx_attention, approx_kmv, approx_kmv_with_report, ApproxConfig};
pub use error::{Error, Result};
pub use kernel::{
    eval_kernel, exact_matvec, materialize, sum_top_t, GaussianKernel, KernelProblem, Matrix,
    PointSet, RealVector,
};
pub use validator::{validate, ValidateOptions, ValidationReport};
