use super::ppcg::step_scalars;
use super::run::{Outcome, Resume, Run};
use super::SolverError;
use crate::comm::Phase::{AfterReductionAndSpmv as After, BeforeReductionComplete as Before};
use crate::sparse::Role::*;

fn init(run: &mut Run) -> Result<(), SolverError> {
    let x0 = run.problem.x0.clone();
    run.put_global(&x0, (X, 0));
    run.residual_of((X, 0), (R, 0))?;
    run.precond((R, 0), (U, 0))?;
    run.spmv((U, 0), (W, 0), false, &[])?;
    Ok(())
}

/// `u = P (b - A x)` and `w = A u` from their definitions.
fn refresh_u(run: &mut Run, i: i64) -> Result<(), SolverError> {
    run.residual_of((X, i), (R, i))?;
    run.precond((R, i), (U, i))?;
    run.spmv((U, i), (W, i), false, &[])
}

pub(crate) fn run(run: &mut Run) -> Result<Outcome, SolverError> {
    init(run)?;
    let mut i: i64 = 0;
    let mut resume = false;
    loop {
        let iu = i as usize;
        run.vecs.prune_before(i - 2);
        let mut pending = None;
        if !resume {
            run.precond((W, i), (M, i))?;
            pending = Some(run.start(&[((W, i), (U, i)), ((M, i), (W, i)), ((U, i), (U, i))])?);
            if let Some(v) = run.failure(iu, iu, Before) {
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
        }
        resume = false;
        run.spmv((M, i), (N, i), true, &[])?;
        if let Some(h) = pending {
            let s = run.wait(h)?;
            let e = run.ledger.entry(i);
            e.gamma = s[0];
            e.delta = s[1];
            e.norm2 = s[2];
            if i == 0 {
                run.norm0 = s[2];
            }
        }

        if run.converged(run.ledger.at(i).norm2) {
            return Ok(Outcome {
                converged: true,
                iterations: iu,
                x_stamp: i,
            });
        }
        if iu >= run.max_iters {
            return Ok(Outcome {
                converged: false,
                iterations: iu,
                x_stamp: i,
            });
        }
        if let Some(v) = run.failure(iu, iu, After) {
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

        let (beta, alpha) = step_scalars(run, i)?;
        if i == 0 {
            run.combine((Z, 0), &[(N, 0)], |v| v[0]);
            run.combine((Q, 0), &[(M, 0)], |v| v[0]);
            run.combine((P, 0), &[(U, 0)], |v| v[0]);
        } else {
            run.combine((Z, i), &[(N, i), (Z, i - 1)], |v| v[0] + beta * v[1]);
            run.combine((Q, i), &[(M, i), (Q, i - 1)], |v| v[0] + beta * v[1]);
            run.combine((P, i), &[(U, i), (P, i - 1)], |v| v[0] + beta * v[1]);
        }
        run.combine((X, i + 1), &[(X, i), (P, i)], |v| v[0] + alpha * v[1]);
        run.combine((U, i + 1), &[(U, i), (Q, i)], |v| v[0] - alpha * v[1]);
        run.combine((W, i + 1), &[(W, i), (Z, i)], |v| v[0] - alpha * v[1]);

        if run.replacement_due(iu + 1) {
            run.note_replacement(iu + 1, (X, i + 1), (U, i + 1));
            refresh_u(run, i + 1)?;
            // q = P A p, z = A q
            run.spmv((P, i), (S, i), false, &[])?;
            run.precond((S, i), (Q, i))?;
            run.spmv((Q, i), (Z, i), false, &[])?;
        }
        i += 1;
    }
}
