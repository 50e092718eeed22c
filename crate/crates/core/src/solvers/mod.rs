//! The four distributed Krylov methods, with optional redundant copies,
//! residual replacement and in-place recovery from node failures.

mod pcg;
mod ppcg;
mod ppcr;
mod run;
mod state;
mod tppcg;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{ClusterSim, CommCounters, CommError, Phase};
use crate::recovery::{RecoveryError, RecoveryReport};
use crate::redundancy::{RedundancyError, RedundancyPlan, SendSets};
use crate::sparse::{DistributedMatrix, Preconditioner, SparseError};

pub use state::{ScalarLedger, Scalars, VectorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pcg")]
    Pcg,
    #[serde(rename = "ppcg")]
    Ppcg,
    #[serde(rename = "ppcr")]
    Ppcr,
    #[serde(rename = "2ppcg")]
    TwoPpcg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pcg, Method::Ppcg, Method::Ppcr, Method::TwoPpcg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pcg => "pcg",
            Method::Ppcg => "ppcg",
            Method::Ppcr => "ppcr",
            Method::TwoPpcg => "2ppcg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method '{s}' (expected pcg, ppcg, ppcr or 2ppcg)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Required reduction of the recurrence residual norm.
    pub rel_tol: f64,
    /// Defaults to `5 n` when unset.
    pub max_iters: Option<usize>,
    /// Residual replacement period in iterations; 0 disables it.
    pub rr_period: usize,
    /// Tolerated simultaneous failures; 0 disables redundant copies.
    pub n_redu: usize,
    /// Relative residual required of the local solves during recovery.
    pub recovery_tol: f64,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        SolverConfig {
            method,
            rel_tol: 1e-8,
            max_iters: None,
            rr_period: 50,
            n_redu: 0,
            recovery_tol: 1e-11,
        }
    }

    pub fn with_n_redu(mut self, n_redu: usize) -> Self {
        self.n_redu = n_redu;
        self
    }

    pub fn with_rr_period(mut self, period: usize) -> Self {
        self.rr_period = period;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = Some(max_iters);
        self
    }

    /// Effective iteration limit for a system of size `n`.
    pub fn iteration_limit(&self, n: usize) -> Result<usize, SolverError> {
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return Err(SolverError::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.recovery_tol.is_nan() || self.recovery_tol <= 0.0 {
            return Err(SolverError::Config("recovery_tol must be positive".into()));
        }
        let limit = self.max_iters.unwrap_or(5 * n);
        if self.method == Method::TwoPpcg {
            if self.max_iters.is_some() && !limit.is_multiple_of(2) {
                return Err(SolverError::Config(format!("2ppcg needs an even max_iters, got {limit}")));
            }
            return Ok(limit + limit % 2);
        }
        Ok(limit)
    }
}

/// A distributed linear system `A x = b` with its preconditioner.
#[derive(Clone)]
pub struct Problem {
    pub a: Arc<DistributedMatrix>,
    pub precond: Arc<Preconditioner>,
    pub b: Vec<f64>,
    pub x0: Vec<f64>,
}

impl Problem {
    pub fn new(a: Arc<DistributedMatrix>, precond: Arc<Preconditioner>, b: Vec<f64>) -> Result<Self, SolverError> {
        if b.len() != a.n() {
            return Err(SolverError::Config(format!("b has {} entries, A has {} rows", b.len(), a.n())));
        }
        let x0 = vec![0.0; b.len()];
        Ok(Problem { a, precond, b, x0 })
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Result<Self, SolverError> {
        if x0.len() != self.b.len() {
            return Err(SolverError::Config("x0 length differs from b".into()));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("breakdown at iteration {iteration}: {scalar} = {value:e} (is the system SPD?)")]
    Breakdown {
        scalar: &'static str,
        iteration: usize,
        value: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Redundancy(#[from] RedundancyError),
}

impl SolverError {
    /// More nodes failed at once than the redundancy level covers.
    pub fn is_unrecoverable(&self) -> bool {
        matches!(self, SolverError::Recovery(e) if e.is_unrecoverable())
            || matches!(self, SolverError::Redundancy(RedundancyError::Unrecoverable { .. }))
    }
}

/// Scalars of one iteration as they appear in the trace. Entries a method
/// does not use are NaN (serialized as null).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub eta: f64,
}

/// True versus recurrence residual at one point of the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResidualAudit {
    pub iteration: usize,
    /// `||b - A x|| / ||b||` (PPCR: `||P (b - A x)|| / ||P b||`)
    pub true_rel: f64,
    /// Norm the stopping test tracks, relative to its start value.
    pub recurrence_rel: f64,
}

impl ResidualAudit {
    pub fn holds(&self) -> bool {
        self.true_rel <= 10.0 * self.recurrence_rel || self.true_rel <= 1e-14
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    /// Final recurrence residual relative to the initial one.
    pub rel_residual: f64,
    pub true_rel_residual: f64,
    pub trace: Vec<IterationRecord>,
    pub counters: CommCounters,
    pub residual_replacements: Vec<usize>,
    pub audits: Vec<ResidualAudit>,
    #[serde(rename = "recovery")]
    pub recoveries: Vec<RecoveryReport>,
    #[serde(skip)]
    pub x: Vec<f64>,
}

impl ConvergenceReport {
    pub fn gammas(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.gamma).collect()
    }
}

/// What the solver shows an observer at the moment a failure strikes,
/// before anything is destroyed.
pub struct FailureContext<'a> {
    pub method: Method,
    pub iteration: usize,
    pub phase: Phase,
    pub victims: &'a [usize],
    pub vectors: &'a VectorSet,
}

/// Hooks for test harnesses; every method has a no-op default.
pub trait SolverObserver {
    fn on_failure(&mut self, _ctx: &FailureContext<'_>) {}
    fn on_recovery(&mut self, _report: &RecoveryReport, _vectors: &VectorSet) {}
}

pub struct NoObserver;

impl SolverObserver for NoObserver {}

/// Runs `config.method` on the cluster. Failures scheduled on the cluster
/// fire at the matching iteration and phase and are recovered in place.
pub fn solve(
    problem: &Problem,
    config: &SolverConfig,
    cluster: &mut ClusterSim,
    observer: &mut dyn SolverObserver,
) -> Result<ConvergenceReport, SolverError> {
    config.iteration_limit(problem.n())?;
    let plan = if config.n_redu > 0 {
        Some(RedundancyPlan::build(&SendSets::compute(&problem.a), config.n_redu)?)
    } else {
        None
    };
    solve_with_plan(problem, config, plan.as_ref(), cluster, observer)
}

/// [`solve`] with a redundancy plan built beforehand (setup excluded from
/// timing). The plan's level must match `config.n_redu`.
pub fn solve_with_plan(
    problem: &Problem,
    config: &SolverConfig,
    plan: Option<&RedundancyPlan>,
    cluster: &mut ClusterSim,
    observer: &mut dyn SolverObserver,
) -> Result<ConvergenceReport, SolverError> {
    let max_iters = config.iteration_limit(problem.n())?;
    if cluster.nodes() != problem.a.nodes() {
        return Err(SolverError::Config(format!(
            "cluster has {} nodes, matrix is split over {}",
            cluster.nodes(),
            problem.a.nodes()
        )));
    }
    if plan.map_or(0, |p| p.n_redu()) != config.n_redu {
        return Err(SolverError::Config("redundancy plan level differs from n_redu".into()));
    }
    let mut run = run::Run::new(problem, config, cluster, plan, observer, max_iters);
    let outcome = match config.method {
        Method::Pcg => pcg::run(&mut run)?,
        Method::Ppcg => ppcg::run(&mut run)?,
        Method::Ppcr => ppcr::run(&mut run)?,
        Method::TwoPpcg => tppcg::run(&mut run)?,
    };
    Ok(run.finish(outcome))
}

fn solve_as(
    method: Method,
    problem: &Problem,
    config: &SolverConfig,
    cluster: &mut ClusterSim,
) -> Result<ConvergenceReport, SolverError> {
    let config = SolverConfig {
        method,
        ..config.clone()
    };
    solve(problem, &config, cluster, &mut NoObserver)
}

pub fn run_pcg(p: &Problem, c: &SolverConfig, cluster: &mut ClusterSim) -> Result<ConvergenceReport, SolverError> {
    solve_as(Method::Pcg, p, c, cluster)
}

pub fn run_ppcg(p: &Problem, c: &SolverConfig, cluster: &mut ClusterSim) -> Result<ConvergenceReport, SolverError> {
    solve_as(Method::Ppcg, p, c, cluster)
}

pub fn run_ppcr(p: &Problem, c: &SolverConfig, cluster: &mut ClusterSim) -> Result<ConvergenceReport, SolverError> {
    solve_as(Method::Ppcr, p, c, cluster)
}

pub fn run_2ppcg(p: &Problem, c: &SolverConfig, cluster: &mut ClusterSim) -> Result<ConvergenceReport, SolverError> {
    solve_as(Method::TwoPpcg, p, c, cluster)
}
