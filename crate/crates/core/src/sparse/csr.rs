//! Compressed sparse row storage for square matrices.

use serde::{Deserialize, Serialize};

use super::SparseError;

/// Square sparse matrix in CSR layout.
///
/// Column indices inside each row are kept sorted and unique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating the structural invariants.
    ///
    /// Rows are sorted by column on the way in; duplicate entries are rejected.
    pub fn from_raw(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if row_ptr.len() != n + 1 {
            return Err(SparseError::Invalid(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                n + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(SparseError::Invalid("row_ptr is not monotone from 0".into()));
        }
        let nnz = row_ptr[n];
        if col_idx.len() != nnz || values.len() != nnz {
            return Err(SparseError::Invalid(format!(
                "nnz mismatch: row_ptr says {nnz}, col_idx {}, values {}",
                col_idx.len(),
                values.len()
            )));
        }
        let mut col_idx = col_idx;
        let mut values = values;
        for row in 0..n {
            let range = row_ptr[row]..row_ptr[row + 1];
            let mut entries: Vec<(usize, f64)> = col_idx[range.clone()]
                .iter()
                .copied()
                .zip(values[range.clone()].iter().copied())
                .collect();
            entries.sort_by_key(|&(c, _)| c);
            for (k, &(c, v)) in entries.iter().enumerate() {
                if c >= n {
                    return Err(SparseError::Invalid(format!(
                        "column {c} out of range in row {row}"
                    )));
                }
                if !v.is_finite() {
                    return Err(SparseError::Invalid(format!(
                        "non-finite value at ({row}, {c})"
                    )));
                }
                if k > 0 && entries[k - 1].0 == c {
                    return Err(SparseError::Invalid(format!(
                        "duplicate entry at ({row}, {c})"
                    )));
                }
            }
            for (slot, (c, v)) in range.zip(entries) {
                col_idx[slot] = c;
                values[slot] = v;
            }
        }
        let mut m = CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
            symmetric: false,
        };
        m.symmetric = m.is_symmetric();
        Ok(m)
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, SparseError> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(SparseError::Invalid(format!(
                    "entry ({r}, {c}) outside {n}x{n}"
                )));
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, v) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_raw(n, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
            symmetric: true,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, SparseError> {
        let n = diag.len();
        Self::from_raw(n, (0..=n).collect(), (0..n).collect(), diag.to_vec())
    }

    /// Dense row-major constructor, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, SparseError> {
        let n = rows.len();
        let mut trips = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(SparseError::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    trips.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &trips)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    /// Column indices and values of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Entry lookup by binary search within the row.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Sequential `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "dimension mismatch in mul_vec");
        (0..self.n).map(|i| self.row_dot(i, x)).collect()
    }

    /// `(A x)_i` for a single row.
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                trips.push((c, i, v));
            }
        }
        CsrMatrix::from_triplets(self.n, &trips).expect("transpose of a valid matrix is valid")
    }

    /// Exact pattern and value symmetry check.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .all(|(&c, &v)| self.get(c, i) == v && self.row(c).0.binary_search(&i).is_ok())
        })
    }

    /// Rows `range` as their own CSR block, columns kept global.
    pub fn row_block(&self, range: std::ops::Range<usize>) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let start = self.row_ptr[range.start];
        let end = self.row_ptr[range.end];
        let ptr = self.row_ptr[range.start..=range.end]
            .iter()
            .map(|p| p - start)
            .collect();
        (
            ptr,
            self.col_idx[start..end].to_vec(),
            self.values[start..end].to_vec(),
        )
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        out
    }
}
