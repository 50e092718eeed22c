#![allow(dead_code)]

use std::sync::Arc;

use kp_core::comm::{ClusterSim, FailureEvent, FailureScript, Phase};
use kp_core::harness::{poisson2d, random_rhs};
use kp_core::recovery::SnapshotOracle;
use kp_core::solvers::{solve, ConvergenceReport, Method, Problem, SolverConfig, SolverError};
use kp_core::sparse::{CsrMatrix, DistributedMatrix, PrecondKind, Preconditioner};

pub fn problem(a: CsrMatrix, nodes: usize, kind: PrecondKind, seed: u64) -> Problem {
    let n = a.n();
    let a = Arc::new(DistributedMatrix::distribute(a, nodes).unwrap());
    let p = Arc::new(Preconditioner::build(&a, kind).unwrap());
    Problem::new(a, p, random_rhs(n, seed)).unwrap()
}

pub fn poisson(k: usize, nodes: usize) -> Problem {
    problem(poisson2d(k), nodes, PrecondKind::BlockJacobi, 7)
}

pub fn clean(p: &Problem, cfg: &SolverConfig) -> ConvergenceReport {
    let mut c = ClusterSim::new(p.a.nodes());
    solve(p, cfg, &mut c, &mut kp_core::solvers::NoObserver).unwrap()
}

pub fn with_failure(
    p: &Problem,
    cfg: &SolverConfig,
    iteration: usize,
    phase: Phase,
    victims: Vec<usize>,
) -> (Result<ConvergenceReport, SolverError>, SnapshotOracle) {
    let mut c = ClusterSim::new(p.a.nodes());
    c.set_failure_script(&FailureScript::single(FailureEvent::at_iteration(iteration, phase, victims)))
        .unwrap();
    let mut oracle = SnapshotOracle::new();
    let r = solve(p, cfg, &mut c, &mut oracle);
    (r, oracle)
}

pub fn cfg(method: Method, n_redu: usize) -> SolverConfig {
    SolverConfig::new(method).with_n_redu(n_redu)
}

/// Random symmetric sparse pattern, strictly diagonally dominant (so SPD),
/// with a random number of off-diagonal couplings per row.
pub fn random_spd(n: usize, seed: u64) -> CsrMatrix {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let density = rng.random_range(0.005..0.05);
    let band = rng.random_bool(0.5).then(|| rng.random_range(1..n / 4 + 2));
    let mut t = Vec::new();
    let mut rowsum = vec![0.0; n];
    for i in 0..n {
        for j in 0..i {
            let hit = match band {
                Some(w) => i - j <= w && rng.random_bool(0.6),
                None => rng.random_bool(density),
            };
            if hit {
                let v = -rng.random_range(0.1..1.0);
                t.push((i, j, v));
                t.push((j, i, v));
                rowsum[i] -= v;
                rowsum[j] -= v;
            }
        }
    }
    for (i, s) in rowsum.into_iter().enumerate() {
        t.push((i, i, s + 1.0));
    }
    CsrMatrix::from_triplets(n, &t).unwrap()
}

pub struct PatternCase {
    pub seed: u64,
    pub n: usize,
    pub nodes: usize,
    pub n_redu: usize,
}

/// The 50 patterns times node counts {4, 8} times levels {1, 2, 3}.
pub fn pattern_cases() -> Vec<PatternCase> {
    let mut out = Vec::new();
    for seed in 0..50u64 {
        let n = 16 + (seed as usize * 97) % 241;
        for nodes in [4, 8] {
            for n_redu in 1..=3 {
                out.push(PatternCase { seed, n, nodes, n_redu });
            }
        }
    }
    out
}
