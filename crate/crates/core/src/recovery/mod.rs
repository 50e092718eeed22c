//! Exact reconstruction of the state lost with failed nodes.
//!
//! Every lost block follows from a relation `B y = v` that the solver keeps
//! (e.g. `w = A u`, `m = P w`): with the survivors' part of `y` and the
//! lost rows of `v`, the lost rows of `y` solve
//! `B_rr y_r = v_r - B_{r,r̄} y_r̄`, a system local to the replacement.

mod algorithms;
mod oracle;

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::comm::{ClusterSim, CommCounters, CommError, Payload, Phase, RecoveryStage, TraceKind};
use crate::local::{LocalSystem, SolveReport};
use crate::redundancy::{retrieve_backups, RedundancyError};
use crate::solvers::{Method, ScalarLedger, VectorSet};
use crate::sparse::{CsrMatrix, DistributedMatrix, DistributedVector, Preconditioner, Role, RowSet, SparseError};

pub use oracle::{BlockCheck, SnapshotOracle};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Redundancy(#[from] RedundancyError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("local solve for {label} failed: {source}")]
    LocalSolve {
        label: String,
        #[source]
        source: SparseError,
    },
    #[error("alpha({iteration}) = 0, the recurrences cannot be inverted")]
    DegenerateAlpha { iteration: i64 },
    #[error("vector {role}({stamp}) is not held by the survivors")]
    MissingVector { role: Role, stamp: i64 },
}

impl RecoveryError {
    pub fn is_unrecoverable(&self) -> bool {
        matches!(self, RecoveryError::Redundancy(RedundancyError::Unrecoverable { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RecoveredBlock {
    pub role: Role,
    pub stamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalSolveRecord {
    pub label: String,
    /// Relative residual of each right-hand side.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// What one recovery did, serialized into the run report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub method: Method,
    pub failed_ranks: Vec<usize>,
    pub phase: Phase,
    pub failed_iteration: usize,
    /// Iteration whose state was rebuilt; 0 after a restart.
    pub recovered_iteration: usize,
    /// No usable window existed, the solver re-ran its initialization.
    pub restarted: bool,
    pub blocks: Vec<RecoveredBlock>,
    pub local_solves: Vec<LocalSolveRecord>,
    pub wall_time_s: f64,
    pub recovery_elements: u64,
    pub recovery_messages: u64,
}

impl RecoveryReport {
    pub fn new(method: Method, failed_ranks: Vec<usize>, phase: Phase, failed_iteration: usize) -> Self {
        RecoveryReport {
            method,
            failed_ranks,
            phase,
            failed_iteration,
            recovered_iteration: 0,
            restarted: false,
            blocks: Vec::new(),
            local_solves: Vec::new(),
            wall_time_s: 0.0,
            recovery_elements: 0,
            recovery_messages: 0,
        }
    }

    pub(crate) fn close(&mut self, started: Instant, before: &CommCounters, after: &CommCounters) {
        self.wall_time_s = started.elapsed().as_secs_f64();
        self.recovery_elements = after.recovery_elements - before.recovery_elements;
        self.recovery_messages = after.messages - before.messages;
    }

    pub fn max_local_residual(&self) -> f64 {
        self.local_solves
            .iter()
            .flat_map(|s| s.residuals.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Iteration whose state is rebuilt after a failure at `(iteration, phase)`,
/// or `None` when no two-iteration window exists yet and the solver has to
/// start over.
///
/// After the reduction and SpMV of iteration `i` completed, the state of `i`
/// is rebuilt; before that, the state of the previous step (two iterations
/// back for 2PPCG).
pub fn resume_iteration(method: Method, iteration: usize, phase: Phase) -> Option<i64> {
    let i = iteration as i64;
    let step = if method == Method::TwoPpcg { 2 } else { 1 };
    let rec = match phase {
        Phase::AfterReductionAndSpmv => i,
        Phase::BeforeReductionComplete => i - step,
    };
    let first = match method {
        Method::Pcg | Method::TwoPpcg => 0,
        Method::Ppcg | Method::Ppcr => 1,
    };
    (rec >= first).then_some(rec)
}

/// Everything a recovery may touch besides the solver state itself.
pub struct RecoveryInput<'a> {
    pub cluster: &'a mut ClusterSim,
    pub a: &'a Arc<DistributedMatrix>,
    pub precond: &'a Arc<Preconditioner>,
    pub b: &'a DistributedVector,
    pub n_redu: usize,
    pub failed: &'a [usize],
    pub tol: f64,
}

/// Rebuilds the failed blocks of the iteration-`i` state of `method` in
/// `vecs`, reading scalars from `ledger`.
pub fn recover(
    input: RecoveryInput<'_>,
    method: Method,
    vecs: &mut VectorSet,
    ledger: &ScalarLedger,
    i: i64,
    report: &mut RecoveryReport,
) -> Result<(), RecoveryError> {
    report.recovered_iteration = i as usize;
    let mut ctx = Ctx::new(input, report);
    ctx.cluster.set_recovering(true);
    let result = match method {
        Method::Pcg => algorithms::pcg(&mut ctx, vecs, ledger, i),
        Method::Ppcg => algorithms::ppcg(&mut ctx, vecs, ledger, i),
        Method::Ppcr => algorithms::ppcr(&mut ctx, vecs, ledger, i),
        Method::TwoPpcg => algorithms::tppcg(&mut ctx, vecs, ledger, i),
    };
    ctx.cluster.set_recovering(false);
    if result.is_ok() {
        let lead = ctx.lead();
        ctx.cluster.record(lead, TraceKind::Recovery(RecoveryStage::Resume));
    }
    result
}

/// Solves `B_rr y_r = v_r - B_{r,r̄} y_r̄` for each right-hand side.
///
/// `complement` holds full-length vectors whose entries on `rows` are
/// ignored. `B` must be SPD.
pub fn reconstruct_block(
    b: &CsrMatrix,
    rows: &RowSet,
    v_r: &[Vec<f64>],
    complement: &[Vec<f64>],
    tol: f64,
) -> Result<(Vec<Vec<f64>>, SolveReport), SparseError> {
    let rhs: Vec<Vec<f64>> = v_r
        .iter()
        .zip(complement)
        .map(|(v, y)| {
            let off = off_rows(b, rows, y);
            v.iter().zip(off).map(|(v, o)| v - o).collect()
        })
        .collect();
    let sys = LocalSystem::sparse_spd(crate::sparse::submatrix_of(b, rows), tol)?;
    sys.solve(&rhs)
}

/// `B_{r,r̄} y_r̄`.
fn off_rows(b: &CsrMatrix, rows: &RowSet, full: &[f64]) -> Vec<f64> {
    rows.rows()
        .map(|i| {
            let (cols, vals) = b.row(i);
            cols.iter()
                .zip(vals)
                .filter(|(c, _)| !rows.contains(**c))
                .map(|(c, v)| v * full[*c])
                .sum()
        })
        .collect()
}

/// Working context of one recovery: runs on the lead (lowest-ranked)
/// replacement, which also does all local solves.
pub(crate) struct Ctx<'a, 'r> {
    pub cluster: &'a mut ClusterSim,
    pub a: &'a Arc<DistributedMatrix>,
    pub precond: &'a Arc<Preconditioner>,
    pub b: &'a DistributedVector,
    n_redu: usize,
    pub failed: Vec<usize>,
    pub rows: RowSet,
    tol: f64,
    a_sys: Option<LocalSystem>,
    pub report: &'r mut RecoveryReport,
}

impl<'a, 'r> Ctx<'a, 'r> {
    fn new(input: RecoveryInput<'a>, report: &'r mut RecoveryReport) -> Self {
        let mut failed = input.failed.to_vec();
        failed.sort_unstable();
        failed.dedup();
        let rows = RowSet::of_nodes(input.a.partition(), &failed);
        Ctx {
            cluster: input.cluster,
            a: input.a,
            precond: input.precond,
            b: input.b,
            n_redu: input.n_redu,
            failed,
            rows,
            tol: input.tol,
            a_sys: None,
            report,
        }
    }

    pub fn lead(&self) -> usize {
        self.failed[0]
    }

    fn stage(&mut self, stage: RecoveryStage) {
        let lead = self.lead();
        self.cluster.record(lead, TraceKind::Recovery(stage));
    }

    /// Survivor blocks of the given vectors, as full-length vectors with
    /// zeros on the failed rows.
    pub fn gather(&mut self, vecs: &VectorSet, keys: &[(Role, i64)]) -> Result<Vec<Vec<f64>>, RecoveryError> {
        self.stage(RecoveryStage::GatherIssued);
        let mut refs = Vec::with_capacity(keys.len());
        for &(role, stamp) in keys {
            refs.push(vecs.try_get(role, stamp).ok_or(RecoveryError::MissingVector { role, stamp })?);
        }
        Ok(self.cluster.gather_from_survivors(&self.failed, &refs)?)
    }

    /// Failed rows of the SpMV input `role` at each stamp, from backups.
    /// Other replacements forward their parts to the lead.
    pub fn retrieve(&mut self, role: Role, stamps: &[i64]) -> Result<Vec<Vec<f64>>, RecoveryError> {
        let got = retrieve_backups(self.cluster, self.a.partition(), &self.failed, stamps, self.n_redu)?;
        let lead = self.lead();
        let partition = self.a.partition().clone();
        for &f in &self.failed[1..] {
            for (t, &stamp) in stamps.iter().enumerate() {
                let payload = Payload::Block {
                    role,
                    stamp,
                    first_row: partition.range(f).start,
                    values: got.blocks[&f][t].clone(),
                };
                self.cluster.send(f, lead, payload)?;
            }
        }
        let mut out = vec![Vec::with_capacity(self.rows.len()); stamps.len()];
        for &f in &self.failed {
            for (t, &stamp) in stamps.iter().enumerate() {
                if f == lead {
                    out[t].extend_from_slice(&got.blocks[&f][t]);
                    continue;
                }
                match self.cluster.recv(lead, f)? {
                    Payload::Block { role: r, stamp: s, values, .. } if r == role && s == stamp => {
                        out[t].extend_from_slice(&values);
                    }
                    _ => return Err(CommError::UnexpectedPayload { at: lead, from: f }.into()),
                }
            }
        }
        if self.failed.len() > 1 {
            self.stage(RecoveryStage::ReplacementExchange);
        }
        Ok(out)
    }

    /// `A_{r,r̄} y_r̄`.
    pub fn a_off(&self, complement: &[f64]) -> Vec<f64> {
        self.a.rows_mul(&self.rows, complement)
    }

    /// `P_{r,r̄} y_r̄`.
    pub fn p_off(&self, complement: &[f64]) -> Vec<f64> {
        self.precond.off_block_rows(&self.rows, complement)
    }

    /// `A_{r,*} y` for a full vector.
    pub fn a_rows(&self, full: &[f64]) -> Vec<f64> {
        self.a.rows_mul(&self.rows, full)
    }

    /// `P_{r,*} y` for a full vector.
    pub fn p_rows(&self, full: &[f64]) -> Vec<f64> {
        self.precond.apply_rows(&self.rows, full)
    }

    /// Full vector from the complement and the failed rows.
    pub fn assemble(&self, complement: &[f64], local: &[f64]) -> Vec<f64> {
        let mut full = complement.to_vec();
        self.rows.scatter(local, &mut full);
        full
    }

    fn log(&mut self, label: &str, residuals: Vec<f64>, iterations: usize) {
        self.report.local_solves.push(LocalSolveRecord {
            label: label.to_string(),
            residuals,
            iterations,
        });
    }

    /// Solves `A_rr y = rhs` for each column.
    pub fn solve_a(&mut self, label: &str, rhs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, RecoveryError> {
        self.stage(RecoveryStage::LocalWork);
        let wrap = |source| RecoveryError::LocalSolve {
            label: label.to_string(),
            source,
        };
        if self.a_sys.is_none() {
            let sys = LocalSystem::sparse_spd(self.a.diag_block(&self.rows), self.tol).map_err(wrap)?;
            self.a_sys = Some(sys);
        }
        let (x, rep) = self.a_sys.as_ref().expect("built above").solve(&rhs).map_err(wrap)?;
        self.log(label, rep.residuals, rep.iterations);
        Ok(x)
    }

    /// Solves `P_rr y = rhs` for each column.
    pub fn solve_p(&mut self, label: &str, rhs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, RecoveryError> {
        self.stage(RecoveryStage::LocalWork);
        let out = self
            .precond
            .solve_diag(&self.rows, &rhs, self.tol)
            .map_err(|source| RecoveryError::LocalSolve {
                label: label.to_string(),
                source,
            })?;
        self.log(label, out.residuals, out.iterations);
        Ok(out.solutions)
    }

    /// Solves `(P_{r,*} A_{*,r}) y = rhs`, the system that determines `x_r`
    /// when only preconditioned residuals are kept.
    pub fn solve_pa(&mut self, label: &str, rhs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, RecoveryError> {
        self.stage(RecoveryStage::LocalWork);
        let a = self.a.global().clone();
        let p = self.precond.clone();
        let rows = self.rows.clone();
        let n = a.n();
        let op: crate::local::Operator = Box::new(move |v: &[f64]| {
            let mut full = vec![0.0; n];
            rows.scatter(v, &mut full);
            p.apply_rows(&rows, &a.mul_vec(&full))
        });
        let wrap = |source| RecoveryError::LocalSolve {
            label: label.to_string(),
            source,
        };
        let sys = LocalSystem::general(self.rows.len(), op, self.tol).map_err(wrap)?;
        let (x, rep) = sys.solve(&rhs).map_err(wrap)?;
        self.log(label, rep.residuals, rep.iterations);
        Ok(x)
    }

    /// Writes rebuilt rows into the solver state. The lead sends every
    /// other replacement its own part.
    pub fn write(&mut self, vecs: &mut VectorSet, role: Role, stamp: i64, values: &[f64]) -> Result<(), RecoveryError> {
        let lead = self.lead();
        let partition = self.a.partition().clone();
        let mut offset = 0;
        for &f in &self.failed {
            let range = partition.range(f);
            let part = &values[offset..offset + range.len()];
            if f != lead {
                let payload = Payload::Block {
                    role,
                    stamp,
                    first_row: range.start,
                    values: part.to_vec(),
                };
                self.cluster.send(lead, f, payload)?;
                match self.cluster.recv(f, lead)? {
                    Payload::Block { values, .. } if values.len() == range.len() => {}
                    _ => return Err(CommError::UnexpectedPayload { at: f, from: lead }.into()),
                }
            }
            offset += range.len();
        }
        if self.failed.len() > 1 {
            self.stage(RecoveryStage::ReplacementExchange);
        }
        let v = vecs
            .get_mut(role, stamp)
            .ok_or(RecoveryError::MissingVector { role, stamp })?;
        v.fill_rows(&self.rows, values);
        self.report.blocks.push(RecoveredBlock { role, stamp });
        Ok(())
    }
}
