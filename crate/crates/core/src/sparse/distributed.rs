use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BlockRowPartition, CsrMatrix, RowSet, SparseError};
use crate::comm::{tree_sum, ClusterSim, CommError, HaloSection, Payload, TraceKind};
use crate::redundancy::RedundancyPlan;

/// Which solver vector a distributed vector holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    X,
    R,
    U,
    W,
    M,
    N,
    S,
    P,
    Q,
    Z,
    C,
    D,
    G,
    H,
    B,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{self:?}").to_lowercase();
        f.write_str(&s)
    }
}

/// A global vector split into the per-node blocks of a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributedVector {
    partition: Arc<BlockRowPartition>,
    blocks: Vec<Vec<f64>>,
    stamp: i64,
    role: Role,
}

impl DistributedVector {
    pub fn zeros(partition: Arc<BlockRowPartition>, role: Role, stamp: i64) -> Self {
        let blocks = (0..partition.nodes())
            .map(|j| vec![0.0; partition.len_of(j)])
            .collect();
        DistributedVector {
            partition,
            blocks,
            stamp,
            role,
        }
    }

    pub fn from_global(partition: Arc<BlockRowPartition>, values: &[f64], role: Role, stamp: i64) -> Self {
        assert_eq!(values.len(), partition.n(), "vector length must match partition");
        let blocks = partition.ranges().map(|r| values[r].to_vec()).collect();
        DistributedVector {
            partition,
            blocks,
            stamp,
            role,
        }
    }

    pub fn partition(&self) -> &Arc<BlockRowPartition> {
        &self.partition
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn stamp(&self) -> i64 {
        self.stamp
    }

    /// Same values under a new role and stamp.
    pub fn relabel(mut self, role: Role, stamp: i64) -> Self {
        self.role = role;
        self.stamp = stamp;
        self
    }

    pub fn block(&self, node: usize) -> &[f64] {
        &self.blocks[node]
    }

    pub fn block_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.blocks[node]
    }

    pub fn to_global(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    /// Overwrites the block of a failed node with NaN, so that any use of
    /// lost data before recovery shows up in the results.
    pub fn lose(&mut self, node: usize) {
        self.blocks[node].fill(f64::NAN);
    }

    /// Values on the rows of `rows`, in ascending row order.
    pub fn restrict(&self, rows: &RowSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len());
        for &j in rows.nodes() {
            out.extend_from_slice(&self.blocks[j]);
        }
        out
    }

    /// Writes set-local values into the blocks of the set's nodes.
    pub fn fill_rows(&mut self, rows: &RowSet, values: &[f64]) {
        let mut k = 0;
        for &j in rows.nodes() {
            let len = self.blocks[j].len();
            self.blocks[j].copy_from_slice(&values[k..k + len]);
            k += len;
        }
    }

    fn check_same(&self, other: &DistributedVector) -> Result<(), SparseError> {
        if self.partition != other.partition {
            return Err(SparseError::PartitionMismatch(format!(
                "{} vs {}",
                self.role, other.role
            )));
        }
        Ok(())
    }

    /// Elementwise combination, computed block by block on each node.
    pub fn map2(&self, other: &DistributedVector, role: Role, stamp: i64, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.partition, other.partition, "partition mismatch");
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        DistributedVector {
            partition: self.partition.clone(),
            blocks,
            stamp,
            role,
        }
    }

    pub fn map3(
        &self,
        b: &DistributedVector,
        c: &DistributedVector,
        role: Role,
        stamp: i64,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Self {
        assert_eq!(self.partition, b.partition, "partition mismatch");
        assert_eq!(self.partition, c.partition, "partition mismatch");
        let blocks = (0..self.blocks.len())
            .map(|j| {
                (0..self.blocks[j].len())
                    .map(|k| f(self.blocks[j][k], b.blocks[j][k], c.blocks[j][k]))
                    .collect()
            })
            .collect();
        DistributedVector {
            partition: self.partition.clone(),
            blocks,
            stamp,
            role,
        }
    }

    /// This node's share of the dot product with `other`.
    pub fn local_dot(&self, node: usize, other: &DistributedVector) -> f64 {
        self.blocks[node]
            .iter()
            .zip(&other.blocks[node])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Dot product combined along the same tree the cluster reduction uses,
    /// without any communication. Handy as an oracle.
    pub fn dot_local_tree(&self, other: &DistributedVector) -> f64 {
        let parts: Vec<f64> = (0..self.blocks.len()).map(|j| self.local_dot(j, other)).collect();
        tree_sum(&parts)
    }
}

/// `alpha * v + w`, elementwise on every node.
pub fn axpy(alpha: f64, v: &DistributedVector, w: &DistributedVector) -> Result<DistributedVector, SparseError> {
    v.check_same(w)?;
    Ok(v.map2(w, w.role, w.stamp, |a, b| alpha * a + b))
}

/// Global dot product through one cluster reduction.
pub fn dot(cluster: &mut ClusterSim, v: &DistributedVector, w: &DistributedVector) -> Result<f64, crate::Error> {
    v.check_same(w)?;
    let parts = (0..v.blocks.len()).map(|j| vec![v.local_dot(j, w)]).collect();
    Ok(cluster.allreduce_sum(parts)?[0])
}

/// Rows owned by one node, with global column indices, plus the exact set of
/// remote columns it reads, grouped by owner.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalBlock {
    pub rows: Range<usize>,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    /// owner rank -> sorted remote column indices needed by these rows
    pub needs: BTreeMap<usize, Vec<usize>>,
}

impl LocalBlock {
    fn row(&self, local: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[local]..self.row_ptr[local + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }
}

/// Block-row distribution of a square matrix. The undistributed matrix is kept
/// as the reliable copy that recovery reloads static rows from.
#[derive(Clone, Debug)]
pub struct DistributedMatrix {
    global: Arc<CsrMatrix>,
    partition: Arc<BlockRowPartition>,
    locals: Vec<LocalBlock>,
}

impl DistributedMatrix {
    pub fn new(global: Arc<CsrMatrix>, partition: Arc<BlockRowPartition>) -> Result<Self, SparseError> {
        if global.n() != partition.n() {
            return Err(SparseError::PartitionMismatch(format!(
                "matrix has {} rows, partition {}",
                global.n(),
                partition.n()
            )));
        }
        let locals = (0..partition.nodes())
            .map(|j| {
                let rows = partition.range(j);
                let (row_ptr, col_idx, values) = global.row_block(rows.clone());
                let mut needs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &c in &col_idx {
                    if !rows.contains(&c) {
                        needs.entry(partition.owner(c)).or_default().push(c);
                    }
                }
                for cols in needs.values_mut() {
                    cols.sort_unstable();
                    cols.dedup();
                }
                LocalBlock {
                    rows,
                    row_ptr,
                    col_idx,
                    values,
                    needs,
                }
            })
            .collect();
        Ok(DistributedMatrix {
            global,
            partition,
            locals,
        })
    }

    pub fn distribute(global: CsrMatrix, nodes: usize) -> Result<Self, SparseError> {
        let partition = Arc::new(BlockRowPartition::new(global.n(), nodes)?);
        Self::new(Arc::new(global), partition)
    }

    pub fn n(&self) -> usize {
        self.global.n()
    }

    pub fn nodes(&self) -> usize {
        self.partition.nodes()
    }

    pub fn global(&self) -> &Arc<CsrMatrix> {
        &self.global
    }

    pub fn partition(&self) -> &Arc<BlockRowPartition> {
        &self.partition
    }

    pub fn local(&self, node: usize) -> &LocalBlock {
        &self.locals[node]
    }

    /// Elements of node `from` that node `to` reads during an SpMV.
    pub fn send_set(&self, from: usize, to: usize) -> &[usize] {
        self.locals[to].needs.get(&from).map_or(&[], Vec::as_slice)
    }

    /// Reassembles the global matrix from the row blocks.
    pub fn gather(&self) -> Result<CsrMatrix, SparseError> {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for l in &self.locals {
            let base = col_idx.len();
            row_ptr.extend(l.row_ptr[1..].iter().map(|p| p + base));
            col_idx.extend_from_slice(&l.col_idx);
            values.extend_from_slice(&l.values);
        }
        CsrMatrix::from_raw(self.n(), row_ptr, col_idx, values)
    }

    /// `(A y)_r` for the rows of a row set, reading `full` as a global vector.
    pub fn rows_mul(&self, rows: &RowSet, full: &[f64]) -> Vec<f64> {
        rows.rows().map(|i| self.global.row_dot(i, full)).collect()
    }

    /// `A_{r,r}` as its own CSR matrix in set-local numbering.
    pub fn diag_block(&self, rows: &RowSet) -> CsrMatrix {
        submatrix(&self.global, rows)
    }

    /// `y = A v` with a halo exchange over the cluster.
    pub fn spmv(
        &self,
        cluster: &mut ClusterSim,
        v: &DistributedVector,
        plan: Option<&RedundancyPlan>,
        out_role: Role,
    ) -> Result<DistributedVector, CommError> {
        self.spmv_with(cluster, v, plan, &[], out_role)
    }

    /// SpMV that also carries `piggyback` vectors over the same messages (same
    /// index sets as `v`), so their copies land in the backup stores too.
    ///
    /// With a plan, every node sends its redundant sets together with the
    /// pattern elements and every receiver stores all copies it got. Without
    /// a plan nothing extra is sent or stored.
    pub fn spmv_with(
        &self,
        cluster: &mut ClusterSim,
        v: &DistributedVector,
        plan: Option<&RedundancyPlan>,
        piggyback: &[&DistributedVector],
        out_role: Role,
    ) -> Result<DistributedVector, CommError> {
        let failed = cluster.failed_ranks();
        if !failed.is_empty() {
            return Err(CommError::PeerFailed(failed));
        }
        assert_eq!(**v.partition(), *self.partition, "vector partition does not match matrix");
        let nn = self.nodes();
        let sections_of = |vec: &DistributedVector, j: usize, to: usize| -> HaloSection {
            let start = self.partition.range(j).start;
            let block = vec.block(j);
            let pattern = self
                .send_set(j, to)
                .iter()
                .map(|&s| (s, block[s - start]))
                .collect();
            let redundant = plan
                .map(|p| p.extras_for(j, to).iter().map(|&s| (s, block[s - start])).collect())
                .unwrap_or_default();
            HaloSection {
                stamp: vec.stamp(),
                pattern,
                redundant,
            }
        };

        let mut redundant_sent = vec![0u64; nn];
        let mut senders: Vec<Vec<usize>> = vec![Vec::new(); nn];
        for j in 0..nn {
            for to in (0..nn).filter(|&k| k != j) {
                let mut sections = vec![sections_of(v, j, to)];
                if sections[0].pattern.is_empty() && sections[0].redundant.is_empty() {
                    continue;
                }
                for extra in piggyback {
                    sections.push(sections_of(extra, j, to));
                }
                redundant_sent[j] += sections
                    .iter()
                    .enumerate()
                    .map(|(k, s)| s.redundant.len() + if k > 0 { s.pattern.len() } else { 0 })
                    .sum::<usize>() as u64;
                cluster.send(
                    j,
                    to,
                    Payload::Halo {
                        role: v.role(),
                        sections,
                    },
                )?;
                senders[to].push(j);
            }
        }
        cluster.note_exchange(&redundant_sent);

        if plan.is_some() {
            // Rotate the two-stamp window on every node before storing.
            let newest = piggyback.iter().map(|p| p.stamp()).fold(v.stamp(), i64::max);
            for k in 0..nn {
                cluster.backup_mut(k).advance(newest);
            }
        }

        let mut out = DistributedVector::zeros(self.partition.clone(), out_role, v.stamp());
        for k in 0..nn {
            let local = &self.locals[k];
            let mut halo: BTreeMap<usize, f64> = BTreeMap::new();
            for &from in &senders[k] {
                let payload = cluster.recv(k, from)?;
                let Payload::Halo { sections, .. } = payload else {
                    return Err(CommError::UnexpectedPayload { at: k, from });
                };
                for &(s, val) in &sections[0].pattern {
                    halo.insert(s, val);
                }
                if plan.is_some() {
                    let store = cluster.backup_mut(k);
                    for sec in &sections {
                        for &(s, val) in sec.pattern.iter().chain(&sec.redundant) {
                            store.store(from, s, sec.stamp, val);
                        }
                    }
                }
            }
            let own = v.block(k);
            let start = local.rows.start;
            let y = out.block_mut(k);
            for (li, yi) in y.iter_mut().enumerate() {
                let (cols, vals) = local.row(li);
                let mut acc = 0.0;
                for (&c, &a) in cols.iter().zip(vals) {
                    let x = if local.rows.contains(&c) {
                        own[c - start]
                    } else {
                        *halo
                            .get(&c)
                            .ok_or(CommError::MissingHalo { node: k, index: c })?
                    };
                    acc += a * x;
                }
                *yi = acc;
            }
            cluster.record(k, TraceKind::Spmv { stamp: v.stamp() });
        }
        Ok(out)
    }
}

/// Rows and columns of `rows` as a square CSR matrix in set-local numbering.
pub(crate) fn submatrix(m: &CsrMatrix, rows: &RowSet) -> CsrMatrix {
    let local = rows.local_index();
    let mut trips = Vec::new();
    for (li, i) in rows.rows().enumerate() {
        let (cols, vals) = m.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            if let Some(lc) = local[c] {
                trips.push((li, lc, v));
            }
        }
    }
    CsrMatrix::from_triplets(rows.len(), &trips).expect("submatrix of a valid matrix is valid")
}
