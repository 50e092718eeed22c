//! Sparse matrices, block-row distribution and the distributed primitives the
//! solvers share.

mod csr;
mod distributed;
mod mmio;
mod partition;
mod precond;

use thiserror::Error;

pub use csr::CsrMatrix;
pub use distributed::{axpy, dot, DistributedMatrix, DistributedVector, LocalBlock, Role};
pub use mmio::{load_matrix_market, read_matrix_market};
pub use partition::{BlockRowPartition, RowSet};
pub use precond::{LocalSolve, PrecondKind, Preconditioner};
pub(crate) use distributed::submatrix as submatrix_of;
pub(crate) use precond::{rel_residual, to_dmatrix};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("unsupported Matrix Market field '{0}' (only real is supported)")]
    UnsupportedField(String),
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error("cannot split {n} rows over {nodes} nodes")]
    BadPartition { n: usize, nodes: usize },
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
    #[error("jacobi needs a strictly positive diagonal, row {row} has {value}")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("diagonal block of node {node} is singular or not positive definite")]
    SingularBlock { node: usize },
    #[error("local solve stalled at relative residual {residual:e}")]
    LocalSolve { residual: f64 },
    #[error("preconditioner is not symmetric")]
    NotSymmetric,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
