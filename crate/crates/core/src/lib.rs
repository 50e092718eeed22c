//! Pipelined CG/CR solvers over a simulated cluster, with redundant copies
//! piggybacked on the SpMV and exact state reconstruction after node failures.

pub mod comm;
pub mod harness;
pub mod local;
pub mod recovery;
pub mod redundancy;
pub mod solvers;
pub mod sparse;

use thiserror::Error;

/// Error type for the operations that span several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sparse(#[from] sparse::SparseError),
    #[error(transparent)]
    Comm(#[from] comm::CommError),
}
