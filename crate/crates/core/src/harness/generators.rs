use crate::sparse::CsrMatrix;

/// 5-point Laplacian on a `k x k` grid (Dirichlet boundary), row-major.
pub fn poisson2d(k: usize) -> CsrMatrix {
    assert!(k >= 2, "grid needs at least 2 points per side");
    let n = k * k;
    let mut t = Vec::with_capacity(5 * n);
    for gy in 0..k {
        for gx in 0..k {
            let i = gy * k + gx;
            if gy > 0 {
                t.push((i, i - k, -1.0));
            }
            if gx > 0 {
                t.push((i, i - 1, -1.0));
            }
            t.push((i, i, 4.0));
            if gx + 1 < k {
                t.push((i, i + 1, -1.0));
            }
            if gy + 1 < k {
                t.push((i, i + k, -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, &t).expect("stencil entries are in range")
}

/// Tridiagonal `tridiag(-1, 2, -1)` of size `n`.
pub fn tridiag(n: usize) -> CsrMatrix {
    assert!(n >= 2, "size must be at least 2");
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        if i > 0 {
            t.push((i, i - 1, -1.0));
        }
        t.push((i, i, 2.0));
        if i + 1 < n {
            t.push((i, i + 1, -1.0));
        }
    }
    CsrMatrix::from_triplets(n, &t).expect("entries are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_3_has_33_entries() {
        // 9 diagonal + 2 * (horizontal 6 + vertical 6) couplings
        let a = poisson2d(3);
        assert_eq!(a.n(), 9);
        assert_eq!(a.nnz(), 33);
        assert!(a.is_symmetric());
    }

    #[test]
    fn poisson_row_sums() {
        let k = 16;
        let a = poisson2d(k);
        let y = a.mul_vec(&vec![1.0; k * k]);
        for gy in 0..k {
            for gx in 0..k {
                let boundary_sides = [gx == 0, gx == k - 1, gy == 0, gy == k - 1]
                    .iter()
                    .filter(|&&b| b)
                    .count();
                assert_eq!(y[gy * k + gx], boundary_sides as f64);
            }
        }
    }

    #[test]
    fn tridiag_is_spd() {
        let a = tridiag(4);
        assert!(a.is_symmetric());
        // Cholesky of the dense form succeeds; smallest eigenvalue is
        // 2 - 2 cos(pi / 5) > 0.
        let d = crate::sparse::to_dmatrix(&a);
        assert!(nalgebra::Cholesky::new(d.clone()).is_some());
        let min = d.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        let want = 2.0 - 2.0 * (std::f64::consts::PI / 5.0).cos();
        assert!((min - want).abs() < 1e-12);
    }
}
