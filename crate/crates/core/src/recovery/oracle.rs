use std::collections::BTreeMap;

use serde::Serialize;

use crate::solvers::{FailureContext, SolverObserver, VectorSet};
use crate::sparse::{Role, RowSet};

use super::RecoveryReport;

/// Difference between one rebuilt block and its value before the failure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub role: Role,
    pub stamp: i64,
    pub failed_iteration: usize,
    /// `||after - before|| / ||before||`; a block that was exactly zero
    /// (e.g. a zero initial guess) is measured against the whole vector,
    /// and absolutely if that is zero too.
    pub rel_err: f64,
}

/// Observer that copies the victims' blocks of every vector just before a
/// failure destroys them and compares each rebuilt block afterwards.
#[derive(Debug, Default)]
pub struct SnapshotOracle {
    rows: Option<RowSet>,
    saved: BTreeMap<(Role, i64), (Vec<f64>, f64)>,
    pub checks: Vec<BlockCheck>,
}

impl SnapshotOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    /// True when at least one block was checked and all are within `tol`.
    pub fn all_within(&self, tol: f64) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.rel_err <= tol)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl SolverObserver for SnapshotOracle {
    fn on_failure(&mut self, ctx: &FailureContext<'_>) {
        self.saved.clear();
        let Some(first) = ctx.vectors.iter().next() else {
            return;
        };
        let rows = RowSet::of_nodes(first.partition(), ctx.victims);
        for v in ctx.vectors.iter() {
            self.saved.insert((v.role(), v.stamp()), (v.restrict(&rows), norm(&v.to_global())));
        }
        self.rows = Some(rows);
    }

    fn on_recovery(&mut self, report: &RecoveryReport, vectors: &VectorSet) {
        let Some(rows) = &self.rows else { return };
        for b in &report.blocks {
            let rel_err = match (self.saved.get(&(b.role, b.stamp)), vectors.try_get(b.role, b.stamp)) {
                (Some((before, whole)), Some(v)) => {
                    let after = v.restrict(rows);
                    let diff: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
                    let scale = [norm(before), *whole, 1.0].into_iter().find(|&s| s > 0.0).unwrap_or(1.0);
                    norm(&diff) / scale
                }
                _ => f64::NAN,
            };
            self.checks.push(BlockCheck {
                role: b.role,
                stamp: b.stamp,
                failed_iteration: report.failed_iteration,
                rel_err,
            });
        }
    }
}
