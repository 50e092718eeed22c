//! One PASS/FAIL line per acceptance criterion (plain binary, output is
//! never captured). Red lines do not fail the run unless
//! KP_ACCEPTANCE_STRICT=1, since a failing binary would stop the rest of
//! `cargo test`; a check that cannot run at all still panics.

mod common;

use std::time::Instant;

use common::*;
use kp_core::comm::{ClusterSim, FailureEvent, FailureScript, Phase};
use kp_core::harness::{poisson2d, tridiag};
use kp_core::recovery::SnapshotOracle;
use kp_core::redundancy::{holders, RedundancyPlan, SendSets};
use kp_core::solvers::{solve, Method, NoObserver, Problem};
use kp_core::sparse::{DistributedMatrix, DistributedVector, PrecondKind, Role};

const PHASES: [Phase; 2] = [Phase::AfterReductionAndSpmv, Phase::BeforeReductionComplete];

struct Verdict {
    ok: bool,
    detail: String,
}

impl Verdict {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Verdict { ok, detail: detail.into() }
    }
}

fn at_half(p: &Problem, m: Method, n_redu: usize, phase: Phase, victims: Vec<usize>) -> (kp_core::solvers::ConvergenceReport, SnapshotOracle) {
    let base = clean(p, &cfg(m, 0));
    let script = FailureScript::single(FailureEvent::at_progress(0.5, phase, victims)).resolve(base.iterations);
    let mut cluster = ClusterSim::new(p.a.nodes());
    cluster.set_failure_script(&script).unwrap();
    let mut oracle = SnapshotOracle::new();
    let r = solve(p, &cfg(m, n_redu), &mut cluster, &mut oracle).expect("recoverable failure");
    (r, oracle)
}

fn exact_state() -> Verdict {
    let p = poisson(16, 4);
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut ok = true;
    for m in Method::ALL {
        for phase in PHASES {
            let t = Instant::now();
            let (r, oracle) = at_half(&p, m, 1, phase, vec![0]);
            let dt = t.elapsed().as_secs_f64();
            slowest = slowest.max(dt);
            worst = worst.max(oracle.max_error());
            ok &= oracle.all_within(1e-8) && dt < 10.0 && r.converged;
        }
    }
    Verdict::new(ok, format!("max block error {worst:.1e} over 4 methods x 2 phases, slowest case {slowest:.2} s"))
}

fn continuity() -> Verdict {
    let cases = [
        ("poisson2d(16) block-jacobi", problem(poisson2d(16), 4, PrecondKind::BlockJacobi, 11)),
        ("tridiag(1024) jacobi", problem(tridiag(1024), 4, PrecondKind::Jacobi, 11)),
    ];
    let mut ok = true;
    let mut bad = Vec::new();
    let mut worst = 0usize;
    for (name, p) in &cases {
        for m in Method::ALL {
            let base = clean(p, &cfg(m, 0));
            for phase in PHASES {
                let (r, _) = at_half(p, m, 1, phase, vec![0]);
                let d = r.iterations.abs_diff(base.iterations);
                let slack = (base.iterations as f64 * 0.01).floor() as usize + 2;
                worst = worst.max(d);
                if !(base.converged && r.converged && d <= slack) {
                    ok = false;
                    bad.push(format!("{name} {m} {phase:?}: {} -> {}", base.iterations, r.iterations));
                }
            }
        }
    }
    let detail = if bad.is_empty() { format!("largest delta {worst} iterations") } else { bad.join("; ") };
    Verdict::new(ok, detail)
}

fn coverage_and_monotonicity() -> (Verdict, Verdict) {
    let t = Instant::now();
    let mut uncovered = 0usize;
    let mut non_monotone = 0usize;
    let cases = pattern_cases();
    for c in &cases {
        let a = DistributedMatrix::distribute(random_spd(c.n, c.seed), c.nodes).unwrap();
        let plan = RedundancyPlan::build(&SendSets::compute(&a), c.n_redu).unwrap();
        let mut cluster = ClusterSim::new(c.nodes);
        for stamp in 0..2 {
            let v = DistributedVector::from_global(a.partition().clone(), &vec![1.0; c.n], Role::P, stamp);
            a.spmv(&mut cluster, &v, Some(&plan), Role::S).unwrap();
        }
        for j in 0..c.nodes {
            for s in a.partition().range(j) {
                uncovered += (0..2).filter(|&st| holders(&cluster, j, s, st) < c.n_redu).count();
            }
            let sizes: Vec<usize> = (1..=c.n_redu).map(|k| plan.redundant(j, k).len()).collect();
            non_monotone += sizes.windows(2).any(|w| w[0] < w[1]) as usize;
        }
    }
    let dt = t.elapsed().as_secs_f64();
    (
        Verdict::new(uncovered == 0 && dt < 60.0, format!("{} pattern cases, {uncovered} uncovered element-stamps, {dt:.1} s", cases.len())),
        Verdict::new(non_monotone == 0, format!("|R_j1| >= ... >= |R_j,n_redu| violated for {non_monotone} (case, node) pairs")),
    )
}

fn necessity() -> Verdict {
    let mut checked = 0usize;
    let mut removable = 0usize;
    for c in pattern_cases().iter().filter(|c| c.seed < 10) {
        let a = DistributedMatrix::distribute(random_spd(c.n, c.seed), c.nodes).unwrap();
        let plan = RedundancyPlan::build(&SendSets::compute(&a), c.n_redu).unwrap();
        for j in 0..c.nodes {
            for k in 1..=c.n_redu {
                for &s in plan.redundant(j, k) {
                    checked += 1;
                    removable += (plan.without(j, k, s).copies(j, s) >= c.n_redu) as usize;
                }
            }
        }
    }
    Verdict::new(removable == 0 && checked > 0, format!("{checked} redundant elements dropped one at a time, {removable} not needed"))
}

fn pcg_equivalence() -> Verdict {
    let p = poisson(16, 4);
    let a = clean(&p, &cfg(Method::Pcg, 0));
    let b = clean(&p, &cfg(Method::Ppcg, 0));
    let n = a.trace.len().min(b.trace.len()).min(50);
    let worst = (0..n)
        .map(|i| ((a.trace[i].gamma - b.trace[i].gamma) / a.trace[i].gamma).abs())
        .fold(0.0, f64::max);
    Verdict::new(
        worst <= 1e-8 && a.iterations == b.iterations,
        format!("max relative gamma difference {worst:.1e} over {n} iterations (both converge at {})", a.iterations),
    )
}

fn convergence() -> Verdict {
    let p = problem(poisson2d(32), 32, PrecondKind::BlockJacobi, 42);
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let r = clean(&p, &cfg(m, 0).with_rr_period(50));
        ok &= r.converged && r.iterations <= 5 * p.n() && r.rel_residual <= 1e-8 && r.true_rel_residual <= 1e-8;
        ok &= !r.residual_replacements.is_empty();
        parts.push(format!("{m} {} its true {:.1e}", r.iterations, r.true_rel_residual));
    }
    Verdict::new(ok, parts.join(", "))
}

fn phase_rule() -> Verdict {
    let p = poisson(16, 4);
    let script = FailureScript::new(vec![
        FailureEvent::at_iteration(8, Phase::BeforeReductionComplete, vec![1]),
        FailureEvent::at_iteration(16, Phase::AfterReductionAndSpmv, vec![2]),
    ]);
    let mut cluster = ClusterSim::new(4);
    cluster.set_failure_script(&script).unwrap();
    let r = solve(&p, &cfg(Method::Ppcg, 1), &mut cluster, &mut NoObserver).unwrap();
    let got: Vec<(usize, usize)> = r.recoveries.iter().map(|x| (x.failed_iteration, x.recovered_iteration)).collect();
    Verdict::new(got == [(8, 7), (16, 16)], format!("(failed, recovered) = {got:?}"))
}

fn multi_failure() -> Verdict {
    let p = poisson(16, 8);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for m in Method::ALL {
        for phase in PHASES {
            let (r, oracle) = at_half(&p, m, 2, phase, vec![3, 4]);
            ok &= r.converged && oracle.all_within(1e-8);
            worst = worst.max(oracle.max_error());
        }
        let base = clean(&p, &cfg(m, 0));
        let mut cluster = ClusterSim::new(8);
        let script = FailureScript::single(FailureEvent::at_iteration(base.iterations / 2, Phase::AfterReductionAndSpmv, vec![3, 4]));
        cluster.set_failure_script(&script).unwrap();
        ok &= matches!(solve(&p, &cfg(m, 1), &mut cluster, &mut NoObserver), Err(e) if e.is_unrecoverable());
    }
    Verdict::new(ok, format!("n_redu=2: max block error {worst:.1e}; n_redu=1: unrecoverable error for all methods"))
}

fn overhead() -> Verdict {
    let mut over = 0usize;
    for c in pattern_cases() {
        let a = DistributedMatrix::distribute(random_spd(c.n, c.seed), c.nodes).unwrap();
        let plan = RedundancyPlan::build(&SendSets::compute(&a), c.n_redu).unwrap();
        let mut cluster = ClusterSim::new(c.nodes);
        let v = DistributedVector::from_global(a.partition().clone(), &vec![1.0; c.n], Role::P, 0);
        a.spmv(&mut cluster, &v, Some(&plan), Role::S).unwrap();
        over += (cluster.counters().max_redundant_per_node_exchange as usize > c.n_redu * c.n.div_ceil(c.nodes)) as usize;
    }
    let p = poisson(16, 4);
    let mut identical = true;
    for m in Method::ALL {
        let base = clean(&p, &cfg(m, 0));
        let redu = clean(&p, &cfg(m, 1));
        let bits = |r: &kp_core::solvers::ConvergenceReport| {
            r.trace.iter().flat_map(|t| [t.gamma.to_bits(), t.delta.to_bits()]).collect::<Vec<_>>()
        };
        identical &= base.iterations == redu.iterations && bits(&base) == bits(&redu);
    }
    Verdict::new(
        over == 0 && identical,
        format!("{over} pattern cases over the volume bound; redundancy-only traces bitwise identical: {identical}"),
    )
}

fn main() {
    let (cov, mono) = coverage_and_monotonicity();
    let cov_ok = cov.ok;
    let three = Verdict::new(cov_ok && mono.ok, format!("coverage: {}; monotonicity: {}", cov.detail, mono.detail));
    let results = [
        (1, "exact-state recovery", exact_state()),
        (2, "behavioral continuity", continuity()),
        (3, "redundancy coverage", three),
        (4, "per-element necessity", necessity()),
        (5, "ppcg matches pcg", pcg_equivalence()),
        (6, "convergence protocol", convergence()),
        (7, "phase rule", phase_rule()),
        (8, "multi-failure", multi_failure()),
        (9, "overhead accounting", overhead()),
    ];
    let mut red = 0;
    for (n, name, v) in &results {
        println!("criterion {n} {}: {name}: {}", if v.ok { "PASS" } else { "FAIL" }, v.detail);
        red += (!v.ok) as usize;
    }
    println!("acceptance: {}/{} PASS", results.len() - red, results.len());
    if red > 0 && std::env::var("KP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
