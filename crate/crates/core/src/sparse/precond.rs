//! Preconditioners `P = M^{-1}`, applied blockwise on the simulated nodes.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::distributed::submatrix;
use super::{CsrMatrix, DistributedMatrix, DistributedVector, Role, RowSet, SparseError};
use crate::comm::{ClusterSim, CommError, TraceKind};
use crate::local::LocalSystem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondKind {
    Identity,
    Jacobi,
    BlockJacobi,
    /// Sparse explicit `P = 2 D^{-1} - D^{-1} A D^{-1}` (first-order Neumann
    /// approximation of `A^{-1}`), coupling neighbouring nodes.
    ExplicitSparse,
}

impl FromStr for PrecondKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" | "none" => Ok(PrecondKind::Identity),
            "jacobi" => Ok(PrecondKind::Jacobi),
            "block-jacobi" | "bjacobi" => Ok(PrecondKind::BlockJacobi),
            "explicit-sparse" | "explicit" => Ok(PrecondKind::ExplicitSparse),
            other => Err(format!("unknown preconditioner '{other}'")),
        }
    }
}

#[derive(Clone, Debug)]
enum Data {
    Identity,
    Jacobi { inv_diag: Vec<f64>, diag: Vec<f64> },
    /// Per node: the dense diagonal block and its Cholesky factor.
    BlockJacobi { blocks: Vec<DMatrix<f64>>, factors: Vec<Cholesky<f64, Dyn>> },
    Explicit { matrix: DistributedMatrix },
}

#[derive(Clone, Debug)]
pub struct Preconditioner {
    kind: PrecondKind,
    data: Data,
    n: usize,
}

impl Preconditioner {
    pub fn build(a: &DistributedMatrix, kind: PrecondKind) -> Result<Self, SparseError> {
        let n = a.n();
        let data = match kind {
            PrecondKind::Identity => Data::Identity,
            PrecondKind::Jacobi => {
                let diag = a.global().diagonal();
                check_positive(&diag)?;
                Data::Jacobi {
                    inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
                    diag,
                }
            }
            PrecondKind::BlockJacobi => {
                let mut blocks = Vec::new();
                let mut factors = Vec::new();
                for j in 0..a.nodes() {
                    let rows = RowSet::of_nodes(a.partition(), &[j]);
                    let sub = submatrix(a.global(), &rows);
                    let dense = to_dmatrix(&sub);
                    let chol = Cholesky::new(dense.clone()).ok_or(SparseError::SingularBlock { node: j })?;
                    blocks.push(dense);
                    factors.push(chol);
                }
                Data::BlockJacobi { blocks, factors }
            }
            PrecondKind::ExplicitSparse => {
                let diag = a.global().diagonal();
                check_positive(&diag)?;
                let g = a.global();
                let mut trips = Vec::with_capacity(g.nnz());
                for i in 0..n {
                    let (cols, vals) = g.row(i);
                    for (&c, &v) in cols.iter().zip(vals) {
                        let mut p = -v / (diag[i] * diag[c]);
                        if c == i {
                            p += 2.0 / diag[i];
                        }
                        trips.push((i, c, p));
                    }
                }
                let p = CsrMatrix::from_triplets(n, &trips)?;
                Data::Explicit {
                    matrix: DistributedMatrix::new(Arc::new(p), a.partition().clone())?,
                }
            }
        };
        Ok(Preconditioner { kind, data, n })
    }

    /// Wraps a given symmetric sparse `P`, distributed like `a`.
    pub fn from_explicit(a: &DistributedMatrix, p: CsrMatrix) -> Result<Self, SparseError> {
        if !p.symmetric() {
            return Err(SparseError::NotSymmetric);
        }
        let n = p.n();
        Ok(Preconditioner {
            kind: PrecondKind::ExplicitSparse,
            data: Data::Explicit {
                matrix: DistributedMatrix::new(Arc::new(p), a.partition().clone())?,
            },
            n,
        })
    }

    pub fn kind(&self) -> PrecondKind {
        self.kind
    }

    /// True when `P` has no entries coupling different nodes.
    pub fn is_block_diagonal(&self) -> bool {
        !matches!(self.data, Data::Explicit { .. })
    }

    /// Sequential `P v`, used by oracles and residual audits.
    pub fn apply_global(&self, v: &[f64]) -> Vec<f64> {
        match &self.data {
            Data::Identity => v.to_vec(),
            Data::Jacobi { inv_diag, .. } => v.iter().zip(inv_diag).map(|(x, d)| x * d).collect(),
            Data::BlockJacobi { factors, .. } => {
                let mut out = Vec::with_capacity(self.n);
                let mut start = 0;
                for f in factors {
                    let len = f.l_dirty().nrows();
                    let rhs = DVector::from_column_slice(&v[start..start + len]);
                    out.extend(f.solve(&rhs).iter());
                    start += len;
                }
                out
            }
            Data::Explicit { matrix } => matrix.global().mul_vec(v),
        }
    }

    /// Distributed `P v`. Only the explicit form communicates.
    pub fn apply(
        &self,
        cluster: &mut ClusterSim,
        v: &DistributedVector,
        out_role: Role,
    ) -> Result<DistributedVector, CommError> {
        if let Data::Explicit { matrix } = &self.data {
            let out = matrix.spmv(cluster, v, None, out_role)?;
            for j in 0..v.partition().nodes() {
                cluster.record(j, TraceKind::PrecondApply { stamp: v.stamp() });
            }
            return Ok(out);
        }
        let failed = cluster.failed_ranks();
        if !failed.is_empty() {
            return Err(CommError::PeerFailed(failed));
        }
        let mut out = DistributedVector::zeros(v.partition().clone(), out_role, v.stamp());
        for j in 0..v.partition().nodes() {
            let range = v.partition().range(j);
            let src = v.block(j);
            let dst = out.block_mut(j);
            match &self.data {
                Data::Identity => dst.copy_from_slice(src),
                Data::Jacobi { inv_diag, .. } => {
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d = src[k] * inv_diag[range.start + k];
                    }
                }
                Data::BlockJacobi { factors, .. } => {
                    let y = factors[j].solve(&DVector::from_column_slice(src));
                    dst.copy_from_slice(y.as_slice());
                }
                Data::Explicit { .. } => unreachable!(),
            }
            cluster.record(j, TraceKind::PrecondApply { stamp: v.stamp() });
        }
        Ok(out)
    }

    /// `(P y)_r` for the rows of a row set, reading `full` as a global vector.
    pub fn apply_rows(&self, rows: &RowSet, full: &[f64]) -> Vec<f64> {
        match &self.data {
            Data::Identity => rows.restrict(full),
            Data::Jacobi { inv_diag, .. } => rows.rows().map(|i| full[i] * inv_diag[i]).collect(),
            Data::BlockJacobi { factors, .. } => {
                let mut out = Vec::with_capacity(rows.len());
                for (&j, range) in rows.nodes().iter().zip(rows.ranges()) {
                    let rhs = DVector::from_column_slice(&full[range.clone()]);
                    out.extend(factors[j].solve(&rhs).iter());
                }
                out
            }
            Data::Explicit { matrix } => matrix.rows_mul(rows, full),
        }
    }

    /// `P_{r, r̄} y_r̄`: the coupling of the rows in `rows` to everything
    /// outside them. `complement` holds `y` with the entries on `rows` ignored.
    pub fn off_block_rows(&self, rows: &RowSet, complement: &[f64]) -> Vec<f64> {
        if self.is_block_diagonal() {
            return vec![0.0; rows.len()];
        }
        let mut masked = complement.to_vec();
        for i in rows.rows() {
            masked[i] = 0.0;
        }
        self.apply_rows(rows, &masked)
    }

    /// Solves `P_{r,r} y = rhs` for each right-hand side.
    ///
    /// For the diagonal and block-diagonal kinds `P_{r,r}` is the inverse of a
    /// known matrix, so the "solve" is a product with that matrix.
    pub fn solve_diag(&self, rows: &RowSet, rhs: &[Vec<f64>], tol: f64) -> Result<LocalSolve, SparseError> {
        let solutions: Vec<Vec<f64>> = match &self.data {
            Data::Identity => rhs.to_vec(),
            Data::Jacobi { diag, .. } => rhs
                .iter()
                .map(|b| rows.rows().zip(b).map(|(i, v)| v * diag[i]).collect())
                .collect(),
            Data::BlockJacobi { blocks, .. } => rhs
                .iter()
                .map(|b| {
                    let mut out = Vec::with_capacity(b.len());
                    let mut k = 0;
                    for &j in rows.nodes() {
                        let len = blocks[j].nrows();
                        let y = &blocks[j] * DVector::from_column_slice(&b[k..k + len]);
                        out.extend(y.iter());
                        k += len;
                    }
                    out
                })
                .collect(),
            Data::Explicit { matrix } => {
                let sys = LocalSystem::sparse_spd(matrix.diag_block(rows), tol)?;
                let (x, report) = sys.solve(rhs)?;
                return Ok(LocalSolve {
                    solutions: x,
                    residuals: report.residuals,
                    iterations: report.iterations,
                });
            }
        };
        // Residual check of the product form against the stored P rows.
        let residuals = rhs
            .iter()
            .zip(&solutions)
            .map(|(b, y)| {
                let mut full = vec![0.0; self.n];
                rows.scatter(y, &mut full);
                let py = self.apply_rows(rows, &full);
                rel_residual(&py, b)
            })
            .collect();
        Ok(LocalSolve {
            solutions,
            residuals,
            iterations: 0,
        })
    }

    /// Explicit CSR form of `P`, where one exists without inverting anything.
    pub fn to_csr(&self) -> Option<CsrMatrix> {
        match &self.data {
            Data::Identity => Some(CsrMatrix::identity(self.n)),
            Data::Jacobi { inv_diag, .. } => CsrMatrix::from_diagonal(inv_diag).ok(),
            Data::BlockJacobi { .. } => None,
            Data::Explicit { matrix } => Some((**matrix.global()).clone()),
        }
    }
}

/// Result of a batch of local solves.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSolve {
    pub solutions: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn rel_residual(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn check_positive(diag: &[f64]) -> Result<(), SparseError> {
    match diag.iter().position(|&d| d <= 0.0) {
        Some(row) => Err(SparseError::NonPositiveDiagonal { row, value: diag[row] }),
        None => Ok(()),
    }
}

pub(crate) fn to_dmatrix(m: &CsrMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.n(), m.n());
    for i in 0..m.n() {
        let (cols, vals) = m.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            d[(i, c)] = v;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tridiag(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, &t).unwrap()
    }

    fn apply(p: &Preconditioner, a: &DistributedMatrix, v: &[f64]) -> Vec<f64> {
        let mut c = ClusterSim::new(a.nodes());
        let dv = DistributedVector::from_global(a.partition().clone(), v, Role::W, 0);
        p.apply(&mut c, &dv, Role::M).unwrap().to_global()
    }

    #[test]
    fn identity_is_noop() {
        let a = DistributedMatrix::distribute(tridiag(6), 2).unwrap();
        let p = Preconditioner::build(&a, PrecondKind::Identity).unwrap();
        let v = [1.0, -3.0, 2.5, 0.0, 7.0, 1e-3];
        assert_eq!(apply(&p, &a, &v), v.to_vec());
    }

    #[test]
    fn jacobi_on_diagonal() {
        let a = DistributedMatrix::distribute(CsrMatrix::from_diagonal(&[2.0, 4.0]).unwrap(), 1).unwrap();
        let p = Preconditioner::build(&a, PrecondKind::Jacobi).unwrap();
        assert_eq!(p.to_csr().unwrap().diagonal(), vec![0.5, 0.25]);
        assert_eq!(apply(&p, &a, &[1.0, 1.0]), vec![0.5, 0.25]);
    }

    #[test]
    fn jacobi_rejects_bad_diagonal() {
        let m = CsrMatrix::from_dense(&[vec![1.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let a = DistributedMatrix::distribute(m, 1).unwrap();
        assert!(matches!(
            Preconditioner::build(&a, PrecondKind::Jacobi),
            Err(SparseError::NonPositiveDiagonal { row: 1, .. })
        ));
    }

    #[test]
    fn block_jacobi_matches_dense_block_solves() {
        let n = 8;
        let m = tridiag(n);
        let a = DistributedMatrix::distribute(m.clone(), 2).unwrap();
        let p = Preconditioner::build(&a, PrecondKind::BlockJacobi).unwrap();
        let v: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.3).collect();
        let got = apply(&p, &a, &v);
        // Oracle: Gaussian elimination on each 4x4 tridiagonal block (Thomas algorithm).
        for blk in 0..2 {
            let r = blk * 4..blk * 4 + 4;
            let (mut c, mut d) = (vec![0.0; 4], vec![0.0; 4]);
            for (k, i) in r.clone().enumerate() {
                let lower = if k > 0 { -1.0 } else { 0.0 };
                let denom = 2.0 - lower * if k > 0 { c[k - 1] } else { 0.0 };
                c[k] = -1.0 / denom;
                d[k] = (v[i] - lower * if k > 0 { d[k - 1] } else { 0.0 }) / denom;
            }
            let mut x = vec![0.0; 4];
            for k in (0..4).rev() {
                x[k] = d[k] - if k < 3 { c[k] * x[k + 1] } else { 0.0 };
            }
            for k in 0..4 {
                assert!((got[r.start + k] - x[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn block_jacobi_rejects_singular_block() {
        let m = CsrMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let a = DistributedMatrix::distribute(m, 1).unwrap();
        assert!(matches!(
            Preconditioner::build(&a, PrecondKind::BlockJacobi),
            Err(SparseError::SingularBlock { node: 0 })
        ));
    }

    #[test]
    fn explicit_matches_distributed_apply() {
        let m = tridiag(10);
        let a = DistributedMatrix::distribute(m, 3).unwrap();
        let p = Preconditioner::build(&a, PrecondKind::ExplicitSparse).unwrap();
        let v: Vec<f64> = (0..10).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let seq = p.to_csr().unwrap().mul_vec(&v);
        let dist = apply(&p, &a, &v);
        for (x, y) in seq.iter().zip(&dist) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
        assert!(!p.is_block_diagonal());
    }

    #[test]
    fn all_kinds_are_spd_on_random_vectors() {
        let a = DistributedMatrix::distribute(tridiag(16), 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for kind in [
            PrecondKind::Identity,
            PrecondKind::Jacobi,
            PrecondKind::BlockJacobi,
            PrecondKind::ExplicitSparse,
        ] {
            let p = Preconditioner::build(&a, kind).unwrap();
            for _ in 0..100 {
                let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let pv = p.apply_global(&v);
                let vpv: f64 = v.iter().zip(&pv).map(|(a, b)| a * b).sum();
                assert!(vpv > 0.0, "{kind:?}");
            }
        }
    }

    #[test]
    fn solve_diag_inverts_rows() {
        let a = DistributedMatrix::distribute(tridiag(12), 4).unwrap();
        let rows = RowSet::of_nodes(a.partition(), &[1, 2]);
        for kind in [PrecondKind::Jacobi, PrecondKind::BlockJacobi, PrecondKind::ExplicitSparse] {
            let p = Preconditioner::build(&a, kind).unwrap();
            let y: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
            let mut full = vec![0.0; 12];
            rows.scatter(&y, &mut full);
            let rhs = p.apply_rows(&rows, &full);
            let s = p.solve_diag(&rows, &[rhs], 1e-12).unwrap();
            for (a, b) in s.solutions[0].iter().zip(&y) {
                assert!((a - b).abs() < 1e-10, "{kind:?}");
            }
        }
    }
}
