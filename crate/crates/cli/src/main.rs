//! `kmv`: exact and approximate Gaussian kernel products, the attention
//! reduction, assumption checks and the scaling bench.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 estimator failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kmv_core::bench::{run_scaling_bench, BenchConfig};
use kmv_core::driver::{approx_attention, approx_kmv_with_report, ApproxConfig, DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_GAMMA};
use kmv_core::io::{read_matrix, write_matrix, MatrixFormat};
use kmv_core::kde::EstimatorKind;
use kmv_core::lightsampler::BudgetRule;
use kmv_core::reduction::{reduce_instance, softmax_attention_oracle, AttentionInstance};
use kmv_core::validator::{validate, ValidateOptions, DEFAULT_MIN_PREFIX};
use kmv_core::{exact_matvec, Error, GaussianKernel, KernelProblem, Matrix, PointSet, RealVector};

#[derive(Parser)]
#[command(name = "kmv", version, about = "Gaussian kernel matrix-vector products")]
struct Cli {
    /// Encoding of every matrix read or written.
    #[arg(long, value_enum, global = true, default_value = "kmv1")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Kmv1,
    Csv,
}

impl From<Format> for MatrixFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Kmv1 => MatrixFormat::Kmv1,
            Format::Csv => MatrixFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Exact,
    UniformSampling,
    HashingBased,
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    Kde,
    IndexLight,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Dense product `Kx`.
    Exact {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Approximate product with `‖Kx - y‖ ≤ ε‖x‖`.
    Approx {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        approx: ApproxArgs,
    },
    /// Writes the augmented points whose Gaussian kernel reproduces attention.
    Reduce {
        #[command(flatten)]
        points: PointArgs,
        #[arg(long)]
        out_keys: PathBuf,
        #[arg(long)]
        out_queries: PathBuf,
        /// Per-row log scale factors, one column.
        #[arg(long)]
        out_scales: PathBuf,
    },
    /// Normalized attention `D⁻¹AV`.
    Attention {
        #[command(flatten)]
        points: PointArgs,
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dense softmax instead of the approximation.
        #[arg(long)]
        exact: bool,
        #[command(flatten)]
        approx: ApproxArgs,
    },
    /// Head/tail ratios, order statistics and the prefix curve as JSON.
    Validate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = DEFAULT_MIN_PREFIX)]
        min_prefix: usize,
        #[arg(long, default_value_t = 1)]
        prefix_step: usize,
        #[arg(long, default_value_t = 50)]
        curve_step: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Exact versus approximate wall clock on synthetic clustered data.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value = "index-light")]
        budget: Budget,
        /// One budget for every row (the largest) instead of per-row budgets.
        #[arg(long)]
        uniform_budget: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PointArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    queries: PathBuf,
}

#[derive(Args)]
struct ProblemArgs {
    #[command(flatten)]
    points: PointArgs,
    #[arg(long)]
    sigma: f64,
}

#[derive(Args)]
struct ApproxArgs {
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "uniform-sampling")]
    estimator: Estimator,
    #[arg(long, value_enum, default_value = "kde")]
    budget: Budget,
}

impl From<Budget> for BudgetRule {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Kde => BudgetRule::Kde,
            Budget::IndexLight => BudgetRule::IndexLight,
            Budget::Exact => BudgetRule::Exact,
        }
    }
}

impl ApproxArgs {
    fn config(&self) -> ApproxConfig {
        let mut cfg = ApproxConfig::new(self.eps, self.seed);
        cfg.gamma = self.gamma;
        cfg.alpha = self.alpha;
        cfg.delta = self.delta;
        cfg.estimator = match self.estimator {
            Estimator::Exact => EstimatorKind::Exact,
            Estimator::UniformSampling => EstimatorKind::UniformSampling,
            Estimator::HashingBased => EstimatorKind::HashingBased,
        };
        cfg.budget = self.budget.into();
        cfg
    }
}

fn load_points(path: &Path, format: MatrixFormat) -> kmv_core::Result<PointSet> {
    PointSet::new(read_matrix(path, format)?)
}

fn load_problem(args: &ProblemArgs, format: MatrixFormat) -> kmv_core::Result<KernelProblem> {
    let queries = load_points(&args.points.queries, format)?;
    let keys = load_points(&args.points.keys, format)?;
    KernelProblem::new(queries, keys, GaussianKernel::new(args.sigma)?)
}

/// A vector stored as a single row or a single column.
fn load_vector(path: &Path, format: MatrixFormat) -> kmv_core::Result<RealVector> {
    let m = read_matrix(path, format)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(Error::Precondition(format!(
            "x must be a single row or column, found {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    RealVector::new(m.into_vec())
}

fn write_vector(v: &RealVector, path: &Path, format: MatrixFormat) -> kmv_core::Result<()> {
    write_matrix(&Matrix::new(v.len(), 1, v.as_slice().to_vec())?, path, format)
}

fn write_json(value: &serde_json::Value, path: Option<&Path>) -> kmv_core::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> kmv_core::Result<()> {
    let format: MatrixFormat = cli.format.into();
    match cli.command {
        Command::Exact { problem, x, out } => {
            let p = load_problem(&problem, format)?;
            let y = exact_matvec(&p, &load_vector(&x, format)?)?;
            write_vector(&y, &out, format)
        }
        Command::Approx { problem, x, out, approx } => {
            let p = load_problem(&problem, format)?;
            let (y, rep) = approx_kmv_with_report(&p, &load_vector(&x, format)?, &approx.config())?;
            eprintln!(
                "heavy pairs {}, light rows sampled {} saturated {}, runs {}{}",
                rep.heavy_pairs,
                rep.light.rows_sampled,
                rep.light.rows_saturated,
                rep.runs,
                if rep.exact_fallback { ", dense fallback" } else { "" }
            );
            write_vector(&y, &out, format)
        }
        Command::Reduce {
            points,
            out_keys,
            out_queries,
            out_scales,
        } => {
            let att = AttentionInstance::new(
                load_points(&points.queries, format)?,
                load_points(&points.keys, format)?,
                None,
            )?;
            let red = reduce_instance(&att)?;
            write_matrix(red.problem.keys().matrix(), &out_keys, format)?;
            write_matrix(red.problem.queries().matrix(), &out_queries, format)?;
            let scales = red.row_log_scales.clone();
            write_matrix(&Matrix::new(scales.len(), 1, scales)?, &out_scales, format)?;
            write_json(
                &json!({
                    "sigma": red.problem.kernel().sigma(),
                    "dim": red.problem.dim(),
                    "queries": red.problem.rows(),
                    "keys": red.problem.n(),
                    "max_key_norm_sq": red.max_key_norm_sq,
                }),
                None,
            )
        }
        Command::Attention {
            points,
            values,
            out,
            exact,
            approx,
        } => {
            let values = read_matrix(&values, format)?;
            let att = AttentionInstance::new(
                load_points(&points.queries, format)?,
                load_points(&points.keys, format)?,
                Some(values.clone()),
            )?;
            let output = if exact {
                softmax_attention_oracle(&att, &values)
            } else {
                let res = approx_attention(&att, &approx.config())?;
                if !res.failed_rows.is_empty() {
                    return Err(Error::EstimatorFailure { rows: res.failed_rows });
                }
                res.output
            };
            write_matrix(&output, &out, format)
        }
        Command::Validate {
            problem,
            min_prefix,
            prefix_step,
            curve_step,
            json,
        } => {
            let p = load_problem(&problem, format)?;
            let rep = validate(
                &p,
                ValidateOptions {
                    min_prefix,
                    prefix_step,
                    curve_step,
                },
            )?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            let value = serde_json::to_value(&rep).expect("report serializes");
            write_json(&value, json.as_deref())
        }
        Command::Bench {
            sizes,
            d,
            eps,
            seed,
            threads,
            budget,
            uniform_budget,
            json,
        } => {
            let mut cfg = BenchConfig::new(sizes, d, eps, seed);
            cfg.threads = threads;
            cfg.approx.budget = budget.into();
            cfg.approx.uniform_budget = uniform_budget;
            let rep = run_scaling_bench(&cfg)?;
            print!("{}", rep.to_table());
            match json {
                Some(p) => write_json(&serde_json::to_value(&rep).expect("report serializes"), Some(&p)),
                None => Ok(()),
            }
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter { .. } => 2,
        Error::EstimatorFailure { .. } => 4,
        _ => 3,
    }
}

fn init_threads() {
    let Some(cap) = std::env::var("KMV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    let n = cap.clamp(1, std::thread::available_parallelism().map_or(1, |p| p.get()));
    // Only fails if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
