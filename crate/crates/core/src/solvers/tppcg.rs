//! Two iterations per step, one merged reduction per step.
//!
//! The quadratic forms giving gamma(i) and delta(i) from the previous step's
//! dot products follow from the three-term recurrences for u and r with
//! symmetric A and P; lambda_8 is (m(i+1), w(i+1)).

use super::run::{Key, Outcome, Resume, Run};
use super::SolverError;
use crate::comm::Phase::{AfterReductionAndSpmv as After, BeforeReductionComplete as Before};
use crate::sparse::Role::{self, *};

const CHAIN: [(Role, Role); 8] = [(X, U), (R, W), (U, M), (W, N), (M, C), (N, D), (C, G), (D, H)];

fn init(run: &mut Run) -> Result<(), SolverError> {
    let x0 = run.problem.x0.clone();
    run.put_global(&x0, (X, 0));
    run.residual_of((X, 0), (R, 0))?;
    run.precond((R, 0), (U, 0))?;
    run.spmv((U, 0), (W, 0), false, &[])?;
    let s = run.reduce(&[((U, 0), (R, 0)), ((U, 0), (W, 0)), ((R, 0), (R, 0))])?;
    let e = run.ledger.entry(0);
    e.gamma = s[0];
    e.delta = s[1];
    e.norm2 = s[2];
    run.norm0 = s[2];
    run.precond((W, 0), (M, 0))?;
    run.spmv((M, 0), (N, 0), false, &[])?;
    run.precond((N, 0), (C, 0))?;
    run.spmv((C, 0), (D, 0), false, &[])?;
    Ok(())
}

/// `v(k) = zeta (v(k-1) -/+ eta t(k-1)) + theta v(k-2)` for the first
/// `count` vectors of the chain. x is the only one updated with `+`.
fn update(run: &mut Run, k: i64, count: usize, zeta: f64, eta: f64, theta: Option<f64>) {
    for &(v, t) in &CHAIN[..count] {
        let sign = if v == X { 1.0 } else { -1.0 };
        let prev: Key = (v, k - 1);
        let dir: Key = (t, k - 1);
        match theta {
            Some(th) => run.combine((v, k), &[prev, dir, (v, k - 2)], |a| {
                zeta * (a[0] + sign * eta * a[1]) + th * a[2]
            }),
            None => run.combine((v, k), &[prev, dir], |a| zeta * (a[0] + sign * eta * a[1])),
        }
    }
}

/// Scalars for step `i >= 2` from the previous step's reduction.
fn step_scalars(run: &mut Run, i: i64) -> Result<(f64, f64, f64, f64, f64), SolverError> {
    let iu = i as usize;
    let p1 = run.ledger.at(i - 1);
    let p2 = run.ledger.at(i - 2);
    let l = p2.lambda;
    let eta = p1.gamma / run.positive("delta", iu - 1, p1.delta)?;
    let zeta = 1.0 / run.nonzero("zeta denominator", iu, 1.0 - p1.gamma * eta / (p2.gamma * p1.zeta * p1.eta))?;
    let (k1, k2, k3) = (zeta, -zeta * eta, 1.0 - zeta);
    let gamma = k1 * k1 * p1.gamma + 2.0 * k1 * k2 * l[0] + 2.0 * k1 * k3 * l[5] + k2 * k2 * l[7]
        + 2.0 * k2 * k3 * l[1]
        + k3 * k3 * l[6];
    let delta = k1 * k1 * l[0] + 2.0 * k1 * k2 * l[7] + 2.0 * k1 * k3 * l[1] + k2 * k2 * l[2]
        + 2.0 * k2 * k3 * l[3]
        + k3 * k3 * l[4];
    let gamma = run.positive("gamma", iu, gamma)?;
    let delta = run.positive("delta", iu, delta)?;
    let eta1 = gamma / delta;
    let zeta1 = 1.0 / run.nonzero("zeta denominator", iu + 1, 1.0 - gamma * eta1 / (p1.gamma * zeta * eta))?;
    let e = run.ledger.entry(i);
    e.gamma = gamma;
    e.delta = delta;
    e.eta = eta;
    e.zeta = zeta;
    e.theta = k3;
    Ok((zeta, eta, k3, zeta1, eta1))
}

/// The step's merged reduction: lambda_1..8, gamma(i+1), (r, r) at i, i+1.
fn dots(i: i64) -> [(Key, Key); 11] {
    let (a, b) = (i, i + 1);
    [
        ((U, b), (W, b)),
        ((U, b), (W, a)),
        ((M, b), (N, b)),
        ((M, b), (W, a)),
        ((U, a), (W, a)),
        ((U, b), (R, a)),
        ((U, a), (R, a)),
        ((M, b), (W, b)),
        ((U, b), (R, b)),
        ((R, a), (R, a)),
        ((R, b), (R, b)),
    ]
}

fn store(run: &mut Run, i: i64, s: &[f64]) {
    let mut lambda = [0.0; 8];
    lambda.copy_from_slice(&s[..8]);
    let e = run.ledger.entry(i);
    e.lambda = lambda;
    e.norm2 = s[9];
    let e = run.ledger.entry(i + 1);
    e.gamma = s[8];
    e.delta = lambda[0];
    e.norm2 = s[10];
}

/// Recomputes both stamps of the step from `x` by definition, with fresh
/// dot products so the next step's scalars match the replaced vectors.
fn replace(run: &mut Run, i: i64) -> Result<(), SolverError> {
    for k in [i, i + 1] {
        run.residual_of((X, k), (R, k))?;
        run.precond((R, k), (U, k))?;
        run.spmv((U, k), (W, k), false, &[])?;
        run.precond((W, k), (M, k))?;
        run.spmv((M, k), (N, k), false, &[])?;
        run.precond((N, k), (C, k))?;
        run.spmv((C, k), (D, k), false, &[])?;
    }
    run.precond((D, i + 1), (G, i + 1))?;
    run.spmv((G, i + 1), (H, i + 1), false, &[])?;
    // the next step's scalars must come from the replaced vectors
    let s = run.reduce(&dots(i))?;
    store(run, i, &s);
    Ok(())
}

pub(crate) fn run(run: &mut Run) -> Result<Outcome, SolverError> {
    init(run)?;
    if run.converged(run.ledger.at(0).norm2) {
        return Ok(Outcome {
            converged: true,
            iterations: 0,
            x_stamp: 0,
        });
    }
    run.positive("gamma", 0, run.ledger.at(0).gamma)?;
    run.positive("delta", 0, run.ledger.at(0).delta)?;
    let mut i: i64 = 0;
    let mut resume = false;
    loop {
        let iu = i as usize;
        run.vecs.prune_before(i - 2);
        let mut pending = None;
        if !resume {
            let (zeta1, eta1, theta1) = if i == 0 {
                let s = run.ledger.at(0);
                (1.0, s.gamma / s.delta, 0.0)
            } else {
                let (zeta, eta, theta, zeta1, eta1) = step_scalars(run, i)?;
                update(run, i, CHAIN.len(), zeta, eta, Some(theta));
                (zeta1, eta1, 1.0 - zeta1)
            };
            let e = run.ledger.entry(i + 1);
            e.zeta = zeta1;
            e.eta = eta1;
            e.theta = theta1;
            update(run, i + 1, 6, zeta1, eta1, (i > 0).then_some(theta1));

            pending = Some(run.start(&dots(i))?);
            if let Some(v) = run.failure(iu, iu + 1, Before) {
                match run.handle_failure(iu, Before, v)? {
                    Resume::At(k) => {
                        i = k;
                        resume = true;
                    }
                    Resume::Restart => {
                        init(run)?;
                        i = 0;
                    }
                }
                continue;
            }
            run.precond((N, i + 1), (C, i + 1))?;
            run.spmv((C, i + 1), (D, i + 1), true, &[(C, i)])?;
        }
        resume = false;
        run.precond((D, i + 1), (G, i + 1))?;
        run.spmv((G, i + 1), (H, i + 1), false, &[])?;
        if let Some(h) = pending {
            let s = run.wait(h)?;
            store(run, i, &s);
        }

        for k in [i, i + 1] {
            if run.converged(run.ledger.at(k).norm2) {
                return Ok(Outcome {
                    converged: true,
                    iterations: k as usize,
                    x_stamp: k,
                });
            }
        }
        if iu + 2 >= run.max_iters {
            return Ok(Outcome {
                converged: false,
                iterations: iu + 1,
                x_stamp: i + 1,
            });
        }
        if let Some(v) = run.failure(iu, iu + 1, After) {
            match run.handle_failure(iu, After, v)? {
                Resume::At(k) => {
                    i = k;
                    resume = true;
                }
                Resume::Restart => {
                    init(run)?;
                    i = 0;
                }
            }
            continue;
        }

        if run.replacement_due(iu) || run.replacement_due(iu + 1) {
            run.note_replacement(iu + 1, (X, i + 1), (R, i + 1));
            replace(run, i)?;
        }
        i += 2;
    }
}
