//! Experiment runner: failure-free baseline, redundancy-only and
//! redundancy-plus-failure sets, with counted volumes and report files.

mod generators;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{ClusterSim, CommCounters, CommError, FailureScript};
use crate::recovery::RecoveryReport;
use crate::redundancy::{PlanEntry, RedundancyError, RedundancyPlan, SendSets};
use crate::solvers::{solve_with_plan, Method, NoObserver, Problem, SolverConfig, SolverError};
use crate::sparse::{load_matrix_market, CsrMatrix, DistributedMatrix, PrecondKind, Preconditioner, SparseError};

pub use generators::{poisson2d, tridiag};
pub use report::{csv_table, emit_report};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "KP_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("nothing to report")]
    EmptyReport,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Redundancy(#[from] RedundancyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixSource {
    Poisson2d(usize),
    Tridiag(usize),
    File(PathBuf),
}

impl MatrixSource {
    pub fn load(&self) -> Result<CsrMatrix, HarnessError> {
        match self {
            MatrixSource::Poisson2d(k) if *k >= 2 => Ok(poisson2d(*k)),
            MatrixSource::Tridiag(n) if *n >= 2 => Ok(tridiag(*n)),
            MatrixSource::File(p) => Ok(load_matrix_market(p)?),
            _ => Err(HarnessError::Config(format!("generator size too small: {self}"))),
        }
    }
}

/// `gen:poisson2d:16`, `gen:tridiag:1024`, or a Matrix Market path.
impl FromStr for MatrixSource {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let Some(rest) = s.strip_prefix("gen:") else {
            return Ok(MatrixSource::File(PathBuf::from(s)));
        };
        let (kind, size) = rest
            .split_once(':')
            .ok_or_else(|| HarnessError::Config(format!("expected gen:<kind>:<size>, got '{s}'")))?;
        let size: usize = size
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad generator size '{size}'")))?;
        match kind {
            "poisson2d" => Ok(MatrixSource::Poisson2d(size)),
            "tridiag" => Ok(MatrixSource::Tridiag(size)),
            _ => Err(HarnessError::Config(format!("unknown generator '{kind}'"))),
        }
    }
}

impl fmt::Display for MatrixSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixSource::Poisson2d(k) => write!(f, "poisson2d_{k}"),
            MatrixSource::Tridiag(n) => write!(f, "tridiag_{n}"),
            MatrixSource::File(p) => {
                let stem = p.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
                f.write_str(&stem)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub matrix: MatrixSource,
    pub method: Method,
    pub nodes: usize,
    pub n_redu: usize,
    pub precond: PrecondKind,
    pub rel_tol: f64,
    pub rr_period: usize,
    pub max_iters: Option<usize>,
    pub failure: FailureScript,
    pub reps: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(matrix: MatrixSource, method: Method) -> Self {
        ExperimentConfig {
            matrix,
            method,
            nodes: 32,
            n_redu: 0,
            precond: PrecondKind::BlockJacobi,
            rel_tol: 1e-8,
            rr_period: 50,
            max_iters: None,
            failure: FailureScript::default(),
            reps: 5,
            seed: 42,
        }
    }

    /// Applies `KP_SEED` when it is set to an integer.
    pub fn with_env_seed(mut self) -> Result<Self, HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.reps == 0 {
            return Err(HarnessError::Config("repetitions must be at least 1".into()));
        }
        if self.nodes == 0 {
            return Err(HarnessError::Config("need at least one node".into()));
        }
        if !self.failure.is_empty() {
            self.failure.validate(self.nodes, self.n_redu)?;
        }
        Ok(())
    }

    fn solver_config(&self, n_redu: usize) -> SolverConfig {
        SolverConfig {
            method: self.method,
            rel_tol: self.rel_tol,
            max_iters: self.max_iters,
            rr_period: self.rr_period,
            n_redu,
            recovery_tol: 1e-11,
        }
    }
}

/// Result of one set of identical runs.
#[derive(Clone, Debug, Serialize)]
pub struct SetResult {
    pub converged: bool,
    pub iterations: usize,
    pub wall_s: Vec<f64>,
    pub mean_wall_s: f64,
    pub true_rel_residual: f64,
    pub counters: CommCounters,
    /// Largest redundant element count a node sent in one SpMV.
    pub max_redundant_per_node_exchange: u64,
    pub gamma_trace: Vec<f64>,
    pub recovery: Vec<RecoveryReport>,
    /// Set when the set could not complete (e.g. unrecoverable failure).
    pub error: Option<String>,
}

impl SetResult {
    fn failed(error: String) -> Self {
        SetResult {
            converged: false,
            iterations: 0,
            wall_s: Vec::new(),
            mean_wall_s: f64::NAN,
            true_rel_residual: f64::NAN,
            counters: CommCounters::default(),
            max_redundant_per_node_exchange: 0,
            gamma_trace: Vec::new(),
            recovery: Vec::new(),
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OverheadRecord {
    pub matrix: String,
    pub method: Method,
    pub n: usize,
    pub nodes: usize,
    pub n_redu: usize,
    pub precond: PrecondKind,
    pub seed: u64,
    pub reps: usize,
    /// Mean failure-free wall time without redundancy.
    pub t0: f64,
    pub baseline: SetResult,
    pub redundancy: Option<SetResult>,
    pub failure: Option<SetResult>,
    /// Failure events with progress triggers resolved to iterations.
    pub failure_script: Option<FailureScript>,
    pub redundancy_overhead_pct: Option<f64>,
    pub failure_overhead_pct: Option<f64>,
}

/// Deterministic right-hand side in [-1, 1).
pub fn random_rhs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distributed system and preconditioner for a config; excluded from timing.
pub fn build_problem(config: &ExperimentConfig) -> Result<Problem, HarnessError> {
    let a = config.matrix.load()?;
    let n = a.n();
    let a = Arc::new(DistributedMatrix::distribute(a, config.nodes)?);
    let p = Arc::new(Preconditioner::build(&a, config.precond)?);
    Ok(Problem::new(a, p, random_rhs(n, config.seed))?)
}

fn run_set(
    problem: &Problem,
    solver: &SolverConfig,
    plan: Option<&RedundancyPlan>,
    script: Option<&FailureScript>,
    reps: usize,
) -> SetResult {
    let mut wall = Vec::with_capacity(reps);
    let mut first = None;
    for _ in 0..reps {
        let mut cluster = ClusterSim::new(problem.a.nodes());
        if let Some(s) = script {
            if let Err(e) = cluster.set_failure_script(s) {
                return SetResult::failed(e.to_string());
            }
        }
        let t = Instant::now();
        let out = solve_with_plan(problem, solver, plan, &mut cluster, &mut NoObserver);
        let elapsed = t.elapsed().as_secs_f64();
        match out {
            Ok(report) => {
                wall.push(elapsed);
                if first.is_none() {
                    first = Some(report);
                }
            }
            Err(e) => return SetResult::failed(e.to_string()),
        }
    }
    let report = first.expect("reps >= 1");
    let mean = wall.iter().sum::<f64>() / wall.len() as f64;
    SetResult {
        converged: report.converged,
        iterations: report.iterations,
        mean_wall_s: mean,
        wall_s: wall,
        true_rel_residual: report.true_rel_residual,
        max_redundant_per_node_exchange: report.counters.max_redundant_per_node_exchange,
        counters: report.counters.clone(),
        gamma_trace: report.gammas(),
        recovery: report.recoveries,
        error: None,
    }
}

fn overhead(t: f64, t0: f64) -> f64 {
    (t - t0) / t0 * 100.0
}

/// Runs the baseline, then (with `n_redu > 0`) the redundancy-only set, then
/// (with a failure script) the failure set. Progress triggers are resolved
/// against the baseline iteration count.
pub fn run_experiment_set(config: &ExperimentConfig) -> Result<OverheadRecord, HarnessError> {
    config.validate()?;
    let problem = build_problem(config)?;
    let baseline = run_set(&problem, &config.solver_config(0), None, None, config.reps);
    let t0 = baseline.mean_wall_s;

    let plan = if config.n_redu > 0 {
        Some(RedundancyPlan::build(&SendSets::compute(&problem.a), config.n_redu)?)
    } else {
        None
    };
    let with_redu = config.solver_config(config.n_redu);
    let redundancy = plan
        .as_ref()
        .map(|p| run_set(&problem, &with_redu, Some(p), None, config.reps));

    let mut resolved = None;
    let failure = if config.failure.is_empty() || plan.is_none() {
        None
    } else if baseline.error.is_some() {
        Some(SetResult::failed("baseline failed, no progress reference".into()))
    } else {
        let script = config.failure.resolve(baseline.iterations);
        script.validate(config.nodes, config.n_redu)?;
        let set = run_set(&problem, &with_redu, plan.as_ref(), Some(&script), config.reps);
        resolved = Some(script);
        Some(set)
    };

    let pct = |s: &Option<SetResult>| {
        s.as_ref()
            .filter(|s| s.error.is_none())
            .map(|s| overhead(s.mean_wall_s, t0))
    };
    Ok(OverheadRecord {
        matrix: config.matrix.to_string(),
        method: config.method,
        n: problem.n(),
        nodes: config.nodes,
        n_redu: config.n_redu,
        precond: config.precond,
        seed: config.seed,
        reps: config.reps,
        t0,
        redundancy_overhead_pct: pct(&redundancy),
        failure_overhead_pct: pct(&failure),
        baseline,
        redundancy,
        failure,
        failure_script: resolved,
    })
}

/// Per-(node, k) plan summary for a matrix split over `nodes`.
pub fn plan_dump(a: &CsrMatrix, nodes: usize, n_redu: usize) -> Result<Vec<PlanEntry>, HarnessError> {
    let a = DistributedMatrix::distribute(a.clone(), nodes)?;
    let plan = RedundancyPlan::build(&SendSets::compute(&a), n_redu)?;
    Ok(plan.summary())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_source_parsing() {
        assert_eq!("gen:poisson2d:16".parse::<MatrixSource>().unwrap(), MatrixSource::Poisson2d(16));
        assert_eq!("gen:tridiag:8".parse::<MatrixSource>().unwrap(), MatrixSource::Tridiag(8));
        assert!("gen:bogus:3".parse::<MatrixSource>().is_err());
        assert!("gen:tridiag:x".parse::<MatrixSource>().is_err());
        assert_eq!(
            "data/m1.mtx".parse::<MatrixSource>().unwrap(),
            MatrixSource::File("data/m1.mtx".into())
        );
        assert_eq!(MatrixSource::File("data/m1.mtx".into()).to_string(), "m1");
    }

    #[test]
    fn rhs_is_seeded() {
        assert_eq!(random_rhs(5, 3), random_rhs(5, 3));
        assert_ne!(random_rhs(5, 3), random_rhs(5, 4));
    }

    #[test]
    fn zero_reps_rejected() {
        let mut c = ExperimentConfig::new(MatrixSource::Tridiag(8), Method::Pcg);
        c.reps = 0;
        assert!(c.validate().is_err());
    }
}
