use super::run::{Outcome, Resume, Run};
use super::SolverError;
use crate::comm::Phase::{AfterReductionAndSpmv as After, BeforeReductionComplete as Before};
use crate::sparse::Role::*;

fn init(run: &mut Run) -> Result<(), SolverError> {
    let x0 = run.problem.x0.clone();
    run.put_global(&x0, (X, 0));
    run.residual_of((X, 0), (R, 0))?;
    run.precond((R, 0), (U, 0))?;
    run.combine((P, 0), &[(U, 0)], |v| v[0]);
    let s = run.reduce(&[((U, 0), (R, 0)), ((R, 0), (R, 0))])?;
    let e = run.ledger.entry(0);
    e.gamma = s[0];
    e.norm2 = s[1];
    run.norm0 = s[1];
    Ok(())
}

pub(crate) fn run(run: &mut Run) -> Result<Outcome, SolverError> {
    init(run)?;
    let mut i: i64 = 0;
    let mut resume = false;
    if run.converged(run.ledger.at(0).norm2) {
        return Ok(Outcome {
            converged: true,
            iterations: 0,
            x_stamp: 0,
        });
    }
    run.positive("gamma", 0, run.ledger.at(0).gamma)?;
    loop {
        let iu = i as usize;
        if iu >= run.max_iters {
            return Ok(Outcome {
                converged: false,
                iterations: iu,
                x_stamp: i,
            });
        }
        run.vecs.prune_before(i - 2);
        if !resume {
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

        run.spmv((P, i), (S, i), true, &[])?;
        let delta = run.reduce(&[((S, i), (P, i))])?[0];
        run.ledger.entry(i).delta = delta;

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

        let gamma = run.ledger.at(i).gamma;
        let delta = run.positive("delta", iu, delta)?;
        let alpha = gamma / delta;
        run.ledger.entry(i).alpha = alpha;
        run.combine((X, i + 1), &[(X, i), (P, i)], |v| v[0] + alpha * v[1]);
        run.combine((R, i + 1), &[(R, i), (S, i)], |v| v[0] - alpha * v[1]);
        run.precond((R, i + 1), (U, i + 1))?;
        let s = run.reduce(&[((U, i + 1), (R, i + 1)), ((R, i + 1), (R, i + 1))])?;
        let e = run.ledger.entry(i + 1);
        e.gamma = s[0];
        e.norm2 = s[1];
        let beta = s[0] / gamma;
        run.ledger.entry(i).beta = beta;
        if run.converged(s[1]) {
            return Ok(Outcome {
                converged: true,
                iterations: iu + 1,
                x_stamp: i + 1,
            });
        }
        run.positive("gamma", iu + 1, s[0])?;
        run.combine((P, i + 1), &[(U, i + 1), (P, i)], |v| v[0] + beta * v[1]);

        if run.replacement_due(iu + 1) {
            run.note_replacement(iu + 1, (X, i + 1), (R, i + 1));
            run.residual_of((X, i + 1), (R, i + 1))?;
            run.precond((R, i + 1), (U, i + 1))?;
        }
        i += 1;
    }
}
