use std::sync::Arc;
use std::time::Instant;

use super::{
    ConvergenceReport, FailureContext, IterationRecord, Problem, ResidualAudit, ScalarLedger, SolverConfig,
    SolverError, SolverObserver, VectorSet,
};
use crate::comm::{ClusterSim, Phase, ReductionHandle};
use crate::recovery::{self, RecoveryInput, RecoveryReport};
use crate::redundancy::RedundancyPlan;
use crate::sparse::{BlockRowPartition, DistributedVector, Role};

pub(crate) type Key = (Role, i64);

pub(crate) struct Outcome {
    pub converged: bool,
    pub iterations: usize,
    pub x_stamp: i64,
}

pub(crate) enum Resume {
    At(i64),
    Restart,
}

/// Mutable state of one solve: the cluster, all vectors and scalars, and
/// what ends up in the report.
pub(crate) struct Run<'a> {
    pub problem: &'a Problem,
    pub config: &'a SolverConfig,
    pub cluster: &'a mut ClusterSim,
    pub plan: Option<&'a RedundancyPlan>,
    observer: &'a mut dyn SolverObserver,
    pub max_iters: usize,
    pub vecs: VectorSet,
    pub ledger: ScalarLedger,
    b: DistributedVector,
    recoveries: Vec<RecoveryReport>,
    rr_points: Vec<usize>,
    audits: Vec<ResidualAudit>,
    /// Squared start value of the norm the stopping test tracks.
    pub norm0: f64,
}

impl<'a> Run<'a> {
    pub fn new(
        problem: &'a Problem,
        config: &'a SolverConfig,
        cluster: &'a mut ClusterSim,
        plan: Option<&'a RedundancyPlan>,
        observer: &'a mut dyn SolverObserver,
        max_iters: usize,
    ) -> Self {
        let b = DistributedVector::from_global(problem.a.partition().clone(), &problem.b, Role::B, 0);
        Run {
            problem,
            config,
            cluster,
            plan,
            observer,
            max_iters,
            vecs: VectorSet::default(),
            ledger: ScalarLedger::default(),
            b,
            recoveries: Vec::new(),
            rr_points: Vec::new(),
            audits: Vec::new(),
            norm0: f64::NAN,
        }
    }

    pub fn partition(&self) -> Arc<BlockRowPartition> {
        self.problem.a.partition().clone()
    }

    /// Puts `b - A x` at `out`, with a halo exchange but no redundant copies.
    pub fn residual_of(&mut self, x: Key, out: Key) -> Result<(), SolverError> {
        let ax = self.problem.a.spmv(self.cluster, self.vecs.get(x.0, x.1), None, out.0)?;
        let r = self.b.map2(&ax, out.0, out.1, |b, ax| b - ax);
        self.vecs.put(r);
        Ok(())
    }

    pub fn put_global(&mut self, values: &[f64], key: Key) {
        let v = DistributedVector::from_global(self.partition(), values, key.0, key.1);
        self.vecs.put(v);
    }

    pub fn precond(&mut self, src: Key, out: Key) -> Result<(), SolverError> {
        debug_assert_eq!(src.1, out.1);
        let y = self.problem.precond.apply(self.cluster, self.vecs.get(src.0, src.1), out.0)?;
        self.vecs.put(y);
        Ok(())
    }

    /// `out = A src`. With `planned`, the halo carries the redundant copies
    /// (and copies of `piggyback`).
    pub fn spmv(&mut self, src: Key, out: Key, planned: bool, piggyback: &[Key]) -> Result<(), SolverError> {
        debug_assert_eq!(src.1, out.1);
        let plan = if planned { self.plan } else { None };
        let extra: Vec<&DistributedVector> = if plan.is_some() {
            piggyback.iter().map(|k| self.vecs.get(k.0, k.1)).collect()
        } else {
            Vec::new()
        };
        let y = self
            .problem
            .a
            .spmv_with(self.cluster, self.vecs.get(src.0, src.1), plan, &extra, out.0)?;
        self.vecs.put(y);
        Ok(())
    }

    /// Elementwise `out = f(inputs)`, all inputs read at the same row.
    pub fn combine(&mut self, out: Key, inputs: &[Key], f: impl Fn(&[f64]) -> f64) {
        let ins: Vec<&DistributedVector> = inputs.iter().map(|k| self.vecs.get(k.0, k.1)).collect();
        let mut result = DistributedVector::zeros(self.partition(), out.0, out.1);
        let mut args = vec![0.0; ins.len()];
        for j in 0..self.partition().nodes() {
            let dst = result.block_mut(j);
            for (e, d) in dst.iter_mut().enumerate() {
                for (a, v) in args.iter_mut().zip(&ins) {
                    *a = v.block(j)[e];
                }
                *d = f(&args);
            }
        }
        self.vecs.put(result);
    }

    /// Starts one merged non-blocking reduction of the given dot products.
    pub fn start(&mut self, pairs: &[(Key, Key)]) -> Result<Vec<ReductionHandle>, SolverError> {
        let nodes = self.partition().nodes();
        let mut handles = Vec::with_capacity(nodes);
        for j in 0..nodes {
            let part: Vec<f64> = pairs
                .iter()
                .map(|(a, b)| self.vecs.get(a.0, a.1).local_dot(j, self.vecs.get(b.0, b.1)))
                .collect();
            handles.push(self.cluster.iallreduce_sum(j, part)?);
        }
        Ok(handles)
    }

    pub fn wait(&mut self, handles: Vec<ReductionHandle>) -> Result<Vec<f64>, SolverError> {
        let mut out = Vec::new();
        for h in handles {
            out = self.cluster.wait(h)?;
        }
        Ok(out)
    }

    pub fn reduce(&mut self, pairs: &[(Key, Key)]) -> Result<Vec<f64>, SolverError> {
        let h = self.start(pairs)?;
        self.wait(h)
    }

    /// Fires any failure scheduled for iterations `lo..=hi` at `phase` and
    /// returns the failed ranks the survivors were notified about.
    pub fn failure(&mut self, lo: usize, hi: usize, phase: Phase) -> Option<Vec<usize>> {
        self.cluster.fire_scheduled_in(lo, hi, phase);
        let notices = self.cluster.pending_notices();
        (!notices.is_empty()).then_some(notices)
    }

    pub fn converged(&self, norm2: f64) -> bool {
        self.norm0 == 0.0 || norm2.sqrt() <= self.config.rel_tol * self.norm0.sqrt()
    }

    pub fn recurrence_rel(&self, norm2: f64) -> f64 {
        if self.norm0 == 0.0 {
            0.0
        } else {
            (norm2 / self.norm0).sqrt()
        }
    }

    pub fn positive(&self, scalar: &'static str, iteration: usize, value: f64) -> Result<f64, SolverError> {
        if value > 0.0 && value.is_finite() {
            Ok(value)
        } else {
            Err(SolverError::Breakdown {
                scalar,
                iteration,
                value,
            })
        }
    }

    pub fn nonzero(&self, scalar: &'static str, iteration: usize, value: f64) -> Result<f64, SolverError> {
        if value != 0.0 && value.is_finite() {
            Ok(value)
        } else {
            Err(SolverError::Breakdown {
                scalar,
                iteration,
                value,
            })
        }
    }

    /// Audits `x` against the norm the recurrences claim.
    pub fn audit(&mut self, iteration: usize, x: Key, recurrence_rel: f64) {
        let x = self.vecs.get(x.0, x.1).to_global();
        let ax = self.problem.a.global().mul_vec(&x);
        let r: Vec<f64> = self.problem.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let true_rel = if self.config.method == super::Method::Ppcr {
            let p = &self.problem.precond;
            norm(&p.apply_global(&r)) / norm(&p.apply_global(&self.problem.b))
        } else {
            norm(&r) / norm(&self.problem.b)
        };
        self.audits.push(ResidualAudit {
            iteration,
            true_rel: if true_rel.is_nan() { 0.0 } else { true_rel },
            recurrence_rel,
        });
    }

    pub fn replacement_due(&self, iteration: usize) -> bool {
        self.config.rr_period > 0 && iteration > 0 && iteration.is_multiple_of(self.config.rr_period)
    }

    /// Records a residual replacement point, auditing `x` against the
    /// tracked recurrence vector first.
    pub fn note_replacement(&mut self, iteration: usize, x: Key, tracked: Key) {
        let t = norm(&self.vecs.get(tracked.0, tracked.1).to_global());
        let rel = if self.norm0 == 0.0 { 0.0 } else { t / self.norm0.sqrt() };
        self.audit(iteration, x, rel);
        self.rr_points.push(iteration);
    }

    /// Destroys the victims' state, brings up replacements and rebuilds the
    /// lost blocks. Tells the caller where to continue.
    pub fn handle_failure(&mut self, iteration: usize, phase: Phase, victims: Vec<usize>) -> Result<Resume, SolverError> {
        let method = self.config.method;
        self.observer.on_failure(&FailureContext {
            method,
            iteration,
            phase,
            victims: &victims,
            vectors: &self.vecs,
        });
        let started = Instant::now();
        let before = self.cluster.counters().clone();
        self.vecs.lose(&victims);
        self.cluster.acknowledge_failures();
        for &v in &victims {
            self.cluster.spawn_replacement(v)?;
        }
        let mut report = RecoveryReport::new(method, victims.clone(), phase, iteration);
        let resume = match recovery::resume_iteration(method, iteration, phase) {
            None => {
                report.restarted = true;
                Resume::Restart
            }
            Some(i) => {
                let keep = if method == super::Method::TwoPpcg { i + 1 } else { i };
                self.vecs.drop_after(keep);
                self.ledger.drop_after(keep);
                let input = RecoveryInput {
                    cluster: &mut *self.cluster,
                    a: &self.problem.a,
                    precond: &self.problem.precond,
                    b: &self.b,
                    n_redu: self.config.n_redu,
                    failed: &victims,
                    tol: self.config.recovery_tol,
                };
                recovery::recover(input, method, &mut self.vecs, &self.ledger, i, &mut report)?;
                Resume::At(i)
            }
        };
        report.close(started, &before, self.cluster.counters());
        self.observer.on_recovery(&report, &self.vecs);
        self.recoveries.push(report);
        if matches!(resume, Resume::Restart) {
            self.vecs.clear();
            self.ledger.clear();
        }
        Ok(resume)
    }

    pub fn finish(mut self, outcome: Outcome) -> ConvergenceReport {
        if outcome.converged {
            let rel = self.recurrence_rel(self.ledger.at(outcome.iterations as i64).norm2);
            self.audit(outcome.iterations, (Role::X, outcome.x_stamp), rel);
        }
        let trace = (0..outcome.iterations as i64)
            .map(|k| {
                let s = self.ledger.at(k);
                IterationRecord {
                    iteration: k as usize,
                    gamma: s.gamma,
                    delta: s.delta,
                    alpha: s.alpha,
                    beta: s.beta,
                    zeta: s.zeta,
                    eta: s.eta,
                }
            })
            .collect();
        let x = self.vecs.get(Role::X, outcome.x_stamp).to_global();
        let ax = self.problem.a.global().mul_vec(&x);
        let r: Vec<f64> = self.problem.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let bn = norm(&self.problem.b);
        let rel_residual = self.recurrence_rel(self.ledger.at(outcome.iterations as i64).norm2);
        ConvergenceReport {
            method: self.config.method,
            converged: outcome.converged,
            iterations: outcome.iterations,
            rel_residual,
            true_rel_residual: if bn == 0.0 { norm(&r) } else { norm(&r) / bn },
            trace,
            counters: self.cluster.counters().clone(),
            residual_replacements: self.rr_points,
            audits: self.audits,
            recoveries: self.recoveries,
            x,
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
