//! Per-method reconstruction sequences. Each rebuilds the failed rows of
//! the iteration-`i` state (and of the step before, where the method keeps
//! two) and leaves the solver ready to continue at its SpMV line.

use super::{Ctx, RecoveryError};
use crate::solvers::{ScalarLedger, VectorSet};
use crate::sparse::Role::{self, *};

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(a - b) / alpha`
fn diff_over(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y) / alpha).collect()
}

fn keys(roles: &[Role], stamps: &[i64]) -> Vec<(Role, i64)> {
    roles
        .iter()
        .flat_map(|&r| stamps.iter().map(move |&s| (r, s)))
        .collect()
}

/// For each stamp: `v_r - P_{r,r̄} y_r̄`.
fn p_rhs(ctx: &Ctx, v: &[Vec<f64>], comp: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter().zip(comp).map(|(v, y)| sub(v, &ctx.p_off(y))).collect()
}

/// For each stamp: `v_r - A_{r,r̄} y_r̄`.
fn a_rhs(ctx: &Ctx, v: &[Vec<f64>], comp: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter().zip(comp).map(|(v, y)| sub(v, &ctx.a_off(y))).collect()
}

/// For each stamp: `b_r - r_r - A_{r,r̄} x_r̄`.
fn x_rhs(ctx: &Ctx, r: &[Vec<f64>], x_comp: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b_r = ctx.b.restrict(&ctx.rows);
    r.iter()
        .zip(x_comp)
        .map(|(r, x)| sub(&sub(&b_r, r), &ctx.a_off(x)))
        .collect()
}

fn alpha(ledger: &ScalarLedger, i: i64) -> Result<f64, RecoveryError> {
    let a = ledger.at(i).alpha;
    if a == 0.0 || !a.is_finite() {
        return Err(RecoveryError::DegenerateAlpha { iteration: i });
    }
    Ok(a)
}

pub(super) fn pcg(ctx: &mut Ctx, vecs: &mut VectorSet, ledger: &ScalarLedger, i: i64) -> Result<(), RecoveryError> {
    let comp = ctx.gather(vecs, &[(R, i), (X, i)])?;
    // At i = 0 there is no previous direction: p(-1) := p(0), beta(-1) = 0.
    let stamps: Vec<i64> = if i == 0 { vec![0] } else { vec![i - 1, i] };
    let p = ctx.retrieve(P, &stamps)?;
    let (p_prev, p_cur) = (&p[0], &p[p.len() - 1]);
    let beta = if i == 0 { 0.0 } else { ledger.at(i - 1).beta };
    let u_r: Vec<f64> = p_cur.iter().zip(p_prev).map(|(c, p)| c - beta * p).collect();

    let r_r = ctx.solve_p("r", p_rhs(ctx, std::slice::from_ref(&u_r), &comp[..1]))?;
    let x_r = ctx.solve_a("x", x_rhs(ctx, &r_r, &comp[1..]))?;

    ctx.write(vecs, X, i, &x_r[0])?;
    ctx.write(vecs, R, i, &r_r[0])?;
    if vecs.contains(U, i) {
        ctx.write(vecs, U, i, &u_r)?;
    }
    ctx.write(vecs, P, i, p_cur)?;
    if i > 0 && vecs.contains(P, i - 1) {
        ctx.write(vecs, P, i - 1, p_prev)?;
    }
    Ok(())
}

pub(super) fn ppcg(ctx: &mut Ctx, vecs: &mut VectorSet, ledger: &ScalarLedger, i: i64) -> Result<(), RecoveryError> {
    let st = [i - 1, i];
    let comp = ctx.gather(vecs, &keys(&[R, U, W, X], &st))?;
    let (r_c, u_c, w_c, x_c) = (&comp[0..2], &comp[2..4], &comp[4..6], &comp[6..8]);
    let m = ctx.retrieve(M, &st)?;
    let alpha = alpha(ledger, i - 1)?;

    let w = ctx.solve_p("w", p_rhs(ctx, &m, w_c))?;
    let u = ctx.solve_a("u", a_rhs(ctx, &w, u_c))?;
    let r = ctx.solve_p("r", p_rhs(ctx, &u, r_c))?;
    let x = ctx.solve_a("x", x_rhs(ctx, &r, x_c))?;

    let z = diff_over(&w[0], &w[1], alpha);
    let q = diff_over(&u[0], &u[1], alpha);
    let s = diff_over(&r[0], &r[1], alpha);
    let p = diff_over(&x[1], &x[0], alpha);

    for (t, &stamp) in st.iter().enumerate() {
        ctx.write(vecs, R, stamp, &r[t])?;
        ctx.write(vecs, U, stamp, &u[t])?;
        ctx.write(vecs, W, stamp, &w[t])?;
        ctx.write(vecs, X, stamp, &x[t])?;
        ctx.write(vecs, M, stamp, &m[t])?;
    }
    ctx.write(vecs, Z, i - 1, &z)?;
    ctx.write(vecs, Q, i - 1, &q)?;
    ctx.write(vecs, S, i - 1, &s)?;
    ctx.write(vecs, P, i - 1, &p)?;
    Ok(())
}

pub(super) fn ppcr(ctx: &mut Ctx, vecs: &mut VectorSet, ledger: &ScalarLedger, i: i64) -> Result<(), RecoveryError> {
    let st = [i - 1, i];
    let comp = ctx.gather(vecs, &keys(&[U, W, X], &st))?;
    let (u_c, w_c, x_c) = (&comp[0..2], &comp[2..4], &comp[4..6]);
    let m = ctx.retrieve(M, &st)?;
    let alpha = alpha(ledger, i - 1)?;

    let w = ctx.solve_p("w", p_rhs(ctx, &m, w_c))?;
    let u = ctx.solve_a("u", a_rhs(ctx, &w, u_c))?;

    // u = P (b - A x): only P_{r,*} A_{*,r} couples x_r to known data.
    let b = ctx.b.to_global();
    let rhs: Vec<Vec<f64>> = x_c
        .iter()
        .zip(&u)
        .map(|(xc, u_r)| {
            let ax = ctx.a.global().mul_vec(xc);
            let t: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            sub(&ctx.p_rows(&t), u_r)
        })
        .collect();
    let x = ctx.solve_pa("x", rhs)?;

    let z = diff_over(&w[0], &w[1], alpha);
    let q = diff_over(&u[0], &u[1], alpha);
    let p = diff_over(&x[1], &x[0], alpha);

    for (t, &stamp) in st.iter().enumerate() {
        ctx.write(vecs, U, stamp, &u[t])?;
        ctx.write(vecs, W, stamp, &w[t])?;
        ctx.write(vecs, X, stamp, &x[t])?;
        ctx.write(vecs, M, stamp, &m[t])?;
    }
    ctx.write(vecs, Z, i - 1, &z)?;
    ctx.write(vecs, Q, i - 1, &q)?;
    ctx.write(vecs, P, i - 1, &p)?;
    Ok(())
}

pub(super) fn tppcg(ctx: &mut Ctx, vecs: &mut VectorSet, _ledger: &ScalarLedger, i: i64) -> Result<(), RecoveryError> {
    let st = [i, i + 1];
    let comp = ctx.gather(vecs, &keys(&[C, M, N, R, U, W, X], &st))?;
    let (c_c, m_c, n_c, r_c) = (&comp[0..2], &comp[2..4], &comp[4..6], &comp[6..8]);
    let (u_c, w_c, x_c) = (&comp[8..10], &comp[10..12], &comp[12..14]);
    let c = ctx.retrieve(C, &st)?;
    // delta(i+1) = lambda_1 and theta = 1 - zeta are already in every
    // survivor's ledger; nothing to rebuild there.

    let d: Vec<Vec<f64>> = c
        .iter()
        .zip(c_c)
        .map(|(c_r, cc)| ctx.a_rows(&ctx.assemble(cc, c_r)))
        .collect();
    let n = ctx.solve_p("n", p_rhs(ctx, &c, n_c))?;
    let m = ctx.solve_a("m", a_rhs(ctx, &n, m_c))?;
    let w = ctx.solve_p("w", p_rhs(ctx, &m, w_c))?;
    let u = ctx.solve_a("u", a_rhs(ctx, &w, u_c))?;
    let r = ctx.solve_p("r", p_rhs(ctx, &u, r_c))?;
    let x = ctx.solve_a("x", x_rhs(ctx, &r, x_c))?;

    for (t, &stamp) in st.iter().enumerate() {
        ctx.write(vecs, C, stamp, &c[t])?;
        ctx.write(vecs, D, stamp, &d[t])?;
        ctx.write(vecs, M, stamp, &m[t])?;
        ctx.write(vecs, N, stamp, &n[t])?;
        ctx.write(vecs, R, stamp, &r[t])?;
        ctx.write(vecs, U, stamp, &u[t])?;
        ctx.write(vecs, W, stamp, &w[t])?;
        ctx.write(vecs, X, stamp, &x[t])?;
    }
    Ok(())
}
