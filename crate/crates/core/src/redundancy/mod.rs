//! Redundant copies of the SpMV input vector, piggybacked on halo messages.
//!
//! Every element an SpMV sends to another node already gives that node a
//! copy. On top of that, node `j` sends each element that would otherwise
//! have fewer than `n_redu` non-owner copies to nearby backup targets `d_jk`.

mod backup;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::comm::CommError;
use crate::sparse::{BlockRowPartition, DistributedMatrix};

pub use backup::{holders, retrieve_backups, BackupStore, RetrievedBlocks};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RedundancyError {
    #[error("backup index k = {k} must satisfy 1 <= k < nn = {nn}")]
    BadTarget { k: usize, nn: usize },
    #[error("n_redu = {n_redu} must satisfy 1 <= n_redu < nn = {nn}")]
    BadLevel { n_redu: usize, nn: usize },
    #[error("unrecoverable: {failed} simultaneous failures exceed n_redu = {n_redu}")]
    Unrecoverable { failed: usize, n_redu: usize },
    #[error("no surviving copy of element {index} (owner {owner}, stamp {stamp})")]
    MissingCopy { owner: usize, index: usize, stamp: i64 },
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// Pattern-driven SpMV sends of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SendSets {
    partition: BlockRowPartition,
    /// `sends[j][k]` = S_jk, sorted global indices.
    sends: Vec<BTreeMap<usize, Vec<usize>>>,
    /// `mult[j][s - start_j]` = number of nodes element s is sent to.
    mult: Vec<Vec<usize>>,
}

impl SendSets {
    pub fn compute(a: &DistributedMatrix) -> Self {
        let p = a.partition();
        let nn = p.nodes();
        let mut sends = vec![BTreeMap::new(); nn];
        let mut mult: Vec<Vec<usize>> = (0..nn).map(|j| vec![0; p.len_of(j)]).collect();
        for (j, sends_j) in sends.iter_mut().enumerate() {
            let start = p.range(j).start;
            for k in (0..nn).filter(|&k| k != j) {
                let s = a.send_set(j, k);
                if s.is_empty() {
                    continue;
                }
                for &e in s {
                    mult[j][e - start] += 1;
                }
                sends_j.insert(k, s.to_vec());
            }
        }
        SendSets {
            partition: (**p).clone(),
            sends,
            mult,
        }
    }

    pub fn nodes(&self) -> usize {
        self.partition.nodes()
    }

    pub fn partition(&self) -> &BlockRowPartition {
        &self.partition
    }

    /// S_jk: elements of node j sent to node k by the sparsity pattern.
    pub fn send_set(&self, j: usize, k: usize) -> &[usize] {
        self.sends[j].get(&k).map_or(&[], Vec::as_slice)
    }

    /// m_j(s) for a global index s owned by j.
    pub fn multiplicity(&self, j: usize, s: usize) -> usize {
        self.mult[j][s - self.partition.range(j).start]
    }

    fn contains(&self, j: usize, k: usize, s: usize) -> bool {
        self.send_set(j, k).binary_search(&s).is_ok()
    }
}

/// Backup target of node `j` for backup index `k` (1-based), 0-based ranks.
pub fn backup_target(j: usize, k: usize, nn: usize) -> Result<usize, RedundancyError> {
    if k == 0 || k >= nn {
        return Err(RedundancyError::BadTarget { k, nn });
    }
    let half = k.div_ceil(2);
    Ok(if k % 2 == 1 { (j + half) % nn } else { (j + nn - k / 2) % nn })
}

/// Redundant sets and targets for every node and backup index.
#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyPlan {
    n_redu: usize,
    sets: SendSets,
    /// `targets[j][k-1]` = d_jk
    targets: Vec<Vec<usize>>,
    /// `redundant[j][k-1]` = R_jk
    redundant: Vec<Vec<Vec<usize>>>,
    /// union of R_jk over k with d_jk = dest, keyed by dest
    extras: Vec<BTreeMap<usize, Vec<usize>>>,
}

impl RedundancyPlan {
    /// Builds the minimal sets.
    ///
    /// An element goes to the backup targets it does not already reach by
    /// pattern, in order k = 1, 2, ..., as allowed by the multiplicity bound
    /// `m_j(s) - g_j(s) <= n_redu - k`, and only while it still has fewer
    /// than `n_redu` non-owner copies.
    pub fn build(sets: &SendSets, n_redu: usize) -> Result<Self, RedundancyError> {
        Self::build_with(sets, n_redu, true)
    }

    fn build_with(sets: &SendSets, n_redu: usize, prune: bool) -> Result<Self, RedundancyError> {
        let nn = sets.nodes();
        if n_redu == 0 || n_redu >= nn {
            return Err(RedundancyError::BadLevel { n_redu, nn });
        }
        let mut targets = Vec::with_capacity(nn);
        let mut redundant = Vec::with_capacity(nn);
        for j in 0..nn {
            let d: Vec<usize> = (1..=n_redu)
                .map(|k| backup_target(j, k, nn))
                .collect::<Result<_, _>>()?;
            let mut r = vec![Vec::new(); n_redu];
            for s in sets.partition.range(j) {
                let m = sets.multiplicity(j, s);
                let g = d.iter().filter(|&&t| sets.contains(j, t, s)).count();
                let mut added = 0;
                for k in 1..=n_redu {
                    let target = d[k - 1];
                    let eligible = !sets.contains(j, target, s) && m as isize - g as isize <= (n_redu - k) as isize;
                    if eligible && (!prune || m + added < n_redu) {
                        r[k - 1].push(s);
                        added += 1;
                    }
                }
            }
            targets.push(d);
            redundant.push(r);
        }
        let extras = (0..nn)
            .map(|j| {
                let mut by_dest: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
                for (k, set) in redundant[j].iter().enumerate() {
                    if !set.is_empty() {
                        by_dest.entry(targets[j][k]).or_default().extend(set.iter().copied());
                    }
                }
                by_dest
                    .into_iter()
                    .map(|(d, s)| (d, s.into_iter().collect()))
                    .collect()
            })
            .collect();
        Ok(RedundancyPlan {
            n_redu,
            sets: sets.clone(),
            targets,
            redundant,
            extras,
        })
    }

    pub fn n_redu(&self) -> usize {
        self.n_redu
    }

    pub fn nodes(&self) -> usize {
        self.sets.nodes()
    }

    pub fn send_sets(&self) -> &SendSets {
        &self.sets
    }

    /// d_jk, with `k` 1-based.
    pub fn target(&self, j: usize, k: usize) -> usize {
        self.targets[j][k - 1]
    }

    /// R_jk, with `k` 1-based.
    pub fn redundant(&self, j: usize, k: usize) -> &[usize] {
        &self.redundant[j][k - 1]
    }

    /// Copy of the plan with element `s` removed from R_jk.
    pub fn without(&self, j: usize, k: usize, s: usize) -> Self {
        let mut out = self.clone();
        out.redundant[j][k - 1].retain(|&e| e != s);
        let target = self.targets[j][k - 1];
        let still: BTreeSet<usize> = (1..=self.n_redu)
            .filter(|&kk| self.targets[j][kk - 1] == target)
            .flat_map(|kk| out.redundant[j][kk - 1].iter().copied())
            .collect();
        if still.is_empty() {
            out.extras[j].remove(&target);
        } else {
            out.extras[j].insert(target, still.into_iter().collect());
        }
        out
    }

    /// Redundant elements node `j` appends to its message for `dest`.
    pub fn extras_for(&self, j: usize, dest: usize) -> &[usize] {
        self.extras[j].get(&dest).map_or(&[], Vec::as_slice)
    }

    /// Non-owner copies of element `s` of node `j` after one exchange,
    /// counted from the sets alone.
    pub fn copies(&self, j: usize, s: usize) -> usize {
        let mut holders: BTreeSet<usize> = self.sets.sends[j]
            .iter()
            .filter(|(_, set)| set.binary_search(&s).is_ok())
            .map(|(&k, _)| k)
            .collect();
        for (d, set) in &self.extras[j] {
            if set.binary_search(&s).is_ok() {
                holders.insert(*d);
            }
        }
        holders.len()
    }

    /// Total redundant elements node `j` sends per exchange.
    pub fn redundant_volume(&self, j: usize) -> usize {
        self.extras[j].values().map(Vec::len).sum()
    }

    /// Per-(j, k) summary for overhead accounting.
    pub fn summary(&self) -> Vec<PlanEntry> {
        let mut out = Vec::new();
        for j in 0..self.nodes() {
            for k in 1..=self.n_redu {
                let target = self.target(j, k);
                out.push(PlanEntry {
                    node: j,
                    k,
                    target,
                    pattern_sends: self.sets.send_set(j, target).len(),
                    redundant_sends: self.redundant(j, k).len(),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub node: usize,
    pub k: usize,
    pub target: usize,
    /// |S_{j, d_jk}|
    pub pattern_sends: usize,
    /// |R_jk|
    pub redundant_sends: usize,
}

/// The redundant sets exactly as the multiplicity rule states them, without
/// the stop-once-covered condition. Kept for comparison: it can send an
/// element to more backup targets than needed.
pub fn literal_redundant_sets(sets: &SendSets, n_redu: usize) -> Result<RedundancyPlan, RedundancyError> {
    RedundancyPlan::build_with(sets, n_redu, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;

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

    fn sets_of(m: CsrMatrix, nn: usize) -> SendSets {
        SendSets::compute(&DistributedMatrix::distribute(m, nn).unwrap())
    }

    #[test]
    fn targets() {
        assert_eq!(backup_target(0, 1, 4).unwrap(), 1);
        assert_eq!(backup_target(0, 2, 4).unwrap(), 3);
        assert_eq!(backup_target(3, 3, 4).unwrap(), 1);
        assert_eq!(backup_target(3, 1, 4).unwrap(), 0);
        assert!(backup_target(0, 4, 4).is_err());
        assert!(backup_target(0, 0, 4).is_err());
    }

    #[test]
    fn diagonal_has_no_sends() {
        let s = sets_of(CsrMatrix::identity(8), 4);
        for j in 0..4 {
            for k in 0..4 {
                assert!(s.send_set(j, k).is_empty());
            }
            for e in s.partition().range(j) {
                assert_eq!(s.multiplicity(j, e), 0);
            }
        }
        let plan = RedundancyPlan::build(&s, 2).unwrap();
        for j in 0..4 {
            let own: Vec<usize> = s.partition().range(j).collect();
            assert_eq!(plan.redundant(j, 1), own.as_slice());
            assert_eq!(plan.redundant(j, 2), own.as_slice());
        }
    }

    #[test]
    fn dense_pattern_sends_everything() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| if i == j { 9.0 } else { 1.0 }).collect()).collect();
        let s = sets_of(CsrMatrix::from_dense(&rows).unwrap(), 4);
        for j in 0..4 {
            for k in (0..4).filter(|&k| k != j) {
                assert_eq!(s.send_set(j, k), s.partition().range(j).collect::<Vec<_>>().as_slice());
            }
            for e in s.partition().range(j) {
                assert_eq!(s.multiplicity(j, e), 3);
            }
        }
    }

    #[test]
    fn tridiagonal_12_over_4() {
        let s = sets_of(tridiag(12), 4);
        assert_eq!(s.send_set(1, 0), &[3]);
        assert_eq!(s.send_set(1, 2), &[5]);
        assert_eq!(s.multiplicity(1, 4), 0);
        let plan = RedundancyPlan::build(&s, 1).unwrap();
        assert_eq!(plan.target(1, 1), 2);
        assert_eq!(plan.redundant(1, 1), &[4]);
        // Literal rule agrees on this pattern.
        assert_eq!(literal_redundant_sets(&s, 1).unwrap(), plan);
    }

    #[test]
    fn tridiagonal_8_over_4_needs_nothing() {
        let s = sets_of(tridiag(8), 4);
        let plan = RedundancyPlan::build(&s, 1).unwrap();
        // Interior blocks are all boundary elements. The outer rows 0 and 7
        // have no neighbour across the matrix edge, so they need a copy.
        assert_eq!(plan.redundant(0, 1), &[0]);
        assert!(plan.redundant(1, 1).is_empty());
        assert!(plan.redundant(2, 1).is_empty());
        assert_eq!(plan.redundant(3, 1), &[7]);
        for j in 0..4 {
            for e in s.partition().range(j) {
                assert_eq!(plan.copies(j, e), 1);
            }
        }
    }

    #[test]
    fn level_bounds() {
        let s = sets_of(tridiag(8), 4);
        assert!(RedundancyPlan::build(&s, 4).is_err());
        assert!(RedundancyPlan::build(&s, 0).is_err());
    }

    #[test]
    fn pruned_sets_are_subsets_of_literal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = 64;
            let mut t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 10.0)).collect();
            for _ in 0..80 {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                t.push((i, j, 1.0));
                t.push((j, i, 1.0));
            }
            let s = sets_of(CsrMatrix::from_triplets(n, &t).unwrap(), 8);
            for n_redu in 1..=3 {
                let p = RedundancyPlan::build(&s, n_redu).unwrap();
                let l = literal_redundant_sets(&s, n_redu).unwrap();
                for j in 0..8 {
                    for k in 1..=n_redu {
                        assert!(p.redundant(j, k).iter().all(|e| l.redundant(j, k).contains(e)));
                    }
                    for e in s.partition().range(j) {
                        assert!(p.copies(j, e) >= n_redu);
                    }
                }
            }
        }
    }
}
