//! Small local linear systems solved on a single (replacement) node.
//!
//! Systems up to [`DENSE_LIMIT`] rows are factorized densely; larger ones use
//! CG (symmetric) or BiCGSTAB (general) down to the requested tolerance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::sparse::{CsrMatrix, SparseError};

pub const DENSE_LIMIT: usize = 512;

/// Matrix-free operator for the iterative path of non-symmetric systems.
pub type Operator = Box<dyn Fn(&[f64]) -> Vec<f64>>;

enum Kind {
    Cholesky(Cholesky<f64, Dyn>, DMatrix<f64>),
    Lu(LU<f64, Dyn, Dyn>, DMatrix<f64>),
    Cg(CsrMatrix),
    BiCgStab(Operator),
}

pub struct LocalSystem {
    kind: Kind,
    dim: usize,
    tol: f64,
    max_iters: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    /// Relative residual `||B y - v|| / ||v||` of each right-hand side.
    pub residuals: Vec<f64>,
    /// Total iterations over all right-hand sides; 0 for dense solves.
    pub iterations: usize,
}

impl LocalSystem {
    /// SPD system given in sparse form.
    pub fn sparse_spd(m: CsrMatrix, tol: f64) -> Result<Self, SparseError> {
        let dim = m.n();
        let kind = if dim <= DENSE_LIMIT {
            let d = crate::sparse::to_dmatrix(&m);
            let chol = Cholesky::new(d.clone()).ok_or(SparseError::SingularBlock { node: usize::MAX })?;
            Kind::Cholesky(chol, d)
        } else {
            Kind::Cg(m)
        };
        Ok(LocalSystem {
            kind,
            dim,
            tol,
            max_iters: 20 * dim.max(50),
        })
    }

    /// General square system given by its action; assembled densely when
    /// small enough.
    pub fn general(dim: usize, op: Operator, tol: f64) -> Result<Self, SparseError> {
        let kind = if dim <= DENSE_LIMIT {
            let mut d = DMatrix::zeros(dim, dim);
            let mut e = vec![0.0; dim];
            for k in 0..dim {
                e[k] = 1.0;
                let col = op(&e);
                d.set_column(k, &DVector::from_vec(col));
                e[k] = 0.0;
            }
            let lu = LU::new(d.clone());
            if !lu.is_invertible() {
                return Err(SparseError::SingularBlock { node: usize::MAX });
            }
            Kind::Lu(lu, d)
        } else {
            Kind::BiCgStab(op)
        };
        Ok(LocalSystem {
            kind,
            dim,
            tol,
            max_iters: 20 * dim.max(50),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.kind, Kind::Cholesky(..) | Kind::Lu(..))
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Cholesky(_, d) | Kind::Lu(_, d) => (d * DVector::from_column_slice(x)).as_slice().to_vec(),
            Kind::Cg(m) => m.mul_vec(x),
            Kind::BiCgStab(op) => op(x),
        }
    }

    /// Solves for every right-hand side, sharing the factorization.
    pub fn solve(&self, rhs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, SolveReport), SparseError> {
        let mut out = Vec::with_capacity(rhs.len());
        let mut report = SolveReport::default();
        for b in rhs {
            assert_eq!(b.len(), self.dim, "right-hand side length");
            if norm(b) == 0.0 {
                out.push(vec![0.0; self.dim]);
                report.residuals.push(0.0);
                continue;
            }
            let x = match &self.kind {
                Kind::Cholesky(c, _) => c.solve(&DVector::from_column_slice(b)).as_slice().to_vec(),
                Kind::Lu(lu, _) => lu
                    .solve(&DVector::from_column_slice(b))
                    .ok_or(SparseError::SingularBlock { node: usize::MAX })?
                    .as_slice()
                    .to_vec(),
                Kind::Cg(m) => {
                    let (x, it) = cg(|v| m.mul_vec(v), b, 0.5 * self.tol, self.max_iters);
                    report.iterations += it;
                    x
                }
                Kind::BiCgStab(op) => {
                    let (x, it) = bicgstab(op, b, 0.5 * self.tol, self.max_iters);
                    report.iterations += it;
                    x
                }
            };
            let res = crate::sparse::rel_residual(&self.apply(&x), b);
            if !res.is_finite() || (!self.is_dense() && res > self.tol) {
                return Err(SparseError::LocalSolve { residual: res });
            }
            report.residuals.push(res);
            out.push(x);
        }
        Ok((out, report))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cg(op: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iters: usize) -> (Vec<f64>, usize) {
    let n = b.len();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dotp(&r, &r);
    for it in 0..max_iters {
        if rr.sqrt() <= tol * bn {
            return (x, it);
        }
        let ap = op(&p);
        let alpha = rr / dotp(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dotp(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    (x, max_iters)
}

fn bicgstab(op: &Operator, b: &[f64], tol: f64, max_iters: usize) -> (Vec<f64>, usize) {
    let n = b.len();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 0..max_iters {
        if norm(&r) <= tol * bn {
            return (x, it);
        }
        let rho_new = dotp(&r0, &r);
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        v = op(&p);
        alpha = rho / dotp(&r0, &v);
        let s: Vec<f64> = (0..n).map(|k| r[k] - alpha * v[k]).collect();
        let t = op(&s);
        let tt = dotp(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dotp(&t, &s) / tt };
        for k in 0..n {
            x[k] += alpha * p[k] + omega * s[k];
            r[k] = s[k] - omega * t[k];
        }
        if omega == 0.0 {
            return (x, it + 1);
        }
    }
    (x, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn laplace(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn dense_and_cg_agree() {
        let b: Vec<f64> = (0..600).map(|i| (i as f64 * 0.1).cos()).collect();
        let big = LocalSystem::sparse_spd(laplace(600), 1e-11).unwrap();
        assert!(!big.is_dense());
        let (x, rep) = big.solve(std::slice::from_ref(&b)).unwrap();
        assert!(rep.residuals[0] <= 1e-11);
        assert!(rep.iterations > 0);
        let small = LocalSystem::sparse_spd(laplace(100), 1e-11).unwrap();
        assert!(small.is_dense());
        let (y, _) = small.solve(&[b[..100].to_vec()]).unwrap();
        let r = laplace(100).mul_vec(&y[0]);
        assert!(crate::sparse::rel_residual(&r, &b[..100]) < 1e-13);
        assert_eq!(x[0].len(), 600);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let s = LocalSystem::sparse_spd(laplace(5), 1e-11).unwrap();
        let (x, _) = s.solve(&[vec![0.0; 5]]).unwrap();
        assert_eq!(x[0], vec![0.0; 5]);
    }

    #[test]
    fn general_operator_small_and_large() {
        for n in [40usize, 700] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
            let off: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
            let op_off = off.clone();
            // Non-symmetric bidiagonal, diagonally dominant.
            let op: Operator = Box::new(move |x: &[f64]| {
                (0..x.len())
                    .map(|i| 2.0 * x[i] + if i > 0 { op_off[i] * x[i - 1] } else { 0.0 })
                    .collect()
            });
            let s = LocalSystem::general(n, op, 1e-11).unwrap();
            let want: Vec<f64> = (0..n).map(|i| i as f64 % 7.0 - 3.0).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| 2.0 * want[i] + if i > 0 { off[i] * want[i - 1] } else { 0.0 })
                .collect();
            let (x, _) = s.solve(&[b]).unwrap();
            for (a, w) in x[0].iter().zip(&want) {
                assert!((a - w).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn indefinite_rejected() {
        let m = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(LocalSystem::sparse_spd(m, 1e-11).is_err());
    }
}
