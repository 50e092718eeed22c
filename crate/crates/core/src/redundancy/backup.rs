use std::collections::BTreeMap;

use super::RedundancyError;
use crate::comm::{ClusterSim, Payload, RecoveryStage, TraceKind};
use crate::sparse::BlockRowPartition;

/// Copies of other nodes' SpMV-input elements, for the two newest stamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackupStore {
    newest: Option<i64>,
    /// stamp -> (owner, index) -> value
    copies: BTreeMap<i64, BTreeMap<(usize, usize), f64>>,
}

impl BackupStore {
    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }

    /// Moves the window forward so that it covers `stamp - 1` and `stamp`.
    pub fn advance(&mut self, stamp: i64) {
        let newest = self.newest.map_or(stamp, |n| n.max(stamp));
        self.newest = Some(newest);
        self.copies.retain(|&s, _| s >= newest - 1);
    }

    /// Records one copy. Stamps outside the window are ignored.
    pub fn store(&mut self, owner: usize, index: usize, stamp: i64, value: f64) {
        if let Some(n) = self.newest {
            if stamp < n - 1 {
                return;
            }
        }
        self.copies.entry(stamp).or_default().insert((owner, index), value);
    }

    pub fn get(&self, owner: usize, index: usize, stamp: i64) -> Option<f64> {
        self.copies.get(&stamp)?.get(&(owner, index)).copied()
    }

    pub fn stamps(&self) -> Vec<i64> {
        self.copies.keys().copied().collect()
    }

    /// All copies of `owner`'s elements at `stamp`, in index order.
    pub fn entries_of(&self, owner: usize, stamp: i64) -> Vec<(usize, f64)> {
        self.copies.get(&stamp).map_or_else(Vec::new, |m| {
            m.range((owner, 0)..=(owner, usize::MAX))
                .map(|(&(_, i), &v)| (i, v))
                .collect()
        })
    }

    pub fn len(&self) -> usize {
        self.copies.values().map(BTreeMap::len).sum()
    }
}

/// Number of live nodes other than the owner holding a copy of one element.
pub fn holders(cluster: &ClusterSim, owner: usize, index: usize, stamp: i64) -> usize {
    (0..cluster.nodes())
        .filter(|&k| k != owner && cluster.is_live(k))
        .filter(|&k| cluster.backup(k).get(owner, index, stamp).is_some())
        .count()
}

/// Blocks of the failed nodes' SpMV-input vector, as assembled on each
/// replacement: `blocks[rank][t]` is the block at `stamps[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedBlocks {
    pub stamps: Vec<i64>,
    pub blocks: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Collects the failed blocks from the survivors' backup stores.
///
/// Each survivor sends every copy it holds of a failed node's elements to
/// that node's replacement. Fails with a distinct error when more nodes
/// failed than the plan tolerates, or when any element has no surviving copy.
pub fn retrieve_backups(
    cluster: &mut ClusterSim,
    partition: &BlockRowPartition,
    failed: &[usize],
    stamps: &[i64],
    n_redu: usize,
) -> Result<RetrievedBlocks, RedundancyError> {
    if failed.len() > n_redu {
        return Err(RedundancyError::Unrecoverable {
            failed: failed.len(),
            n_redu,
        });
    }
    let survivors: Vec<usize> = (0..cluster.nodes()).filter(|r| !failed.contains(r)).collect();
    for &h in &survivors {
        for &f in failed {
            for &stamp in stamps {
                let entries = cluster.backup(h).entries_of(f, stamp);
                if entries.is_empty() {
                    continue;
                }
                cluster.send(h, f, Payload::Backup { owner: f, stamp, entries })?;
            }
        }
    }
    let mut blocks = BTreeMap::new();
    for &f in failed {
        let range = partition.range(f);
        let mut per_stamp: Vec<Vec<Option<f64>>> = vec![vec![None; range.len()]; stamps.len()];
        for &h in &survivors {
            for (t, &stamp) in stamps.iter().enumerate() {
                if cluster.backup(h).entries_of(f, stamp).is_empty() {
                    continue;
                }
                match cluster.recv(f, h)? {
                    Payload::Backup { owner, stamp: st, entries } if owner == f && st == stamp => {
                        for (i, v) in entries {
                            per_stamp[t][i - range.start] = Some(v);
                        }
                    }
                    _ => return Err(crate::comm::CommError::UnexpectedPayload { at: f, from: h }.into()),
                }
            }
        }
        let mut assembled = Vec::with_capacity(stamps.len());
        for (t, vals) in per_stamp.into_iter().enumerate() {
            let mut out = Vec::with_capacity(vals.len());
            for (k, v) in vals.into_iter().enumerate() {
                out.push(v.ok_or(RedundancyError::MissingCopy {
                    owner: f,
                    index: range.start + k,
                    stamp: stamps[t],
                })?);
            }
            assembled.push(out);
        }
        blocks.insert(f, assembled);
        cluster.record(f, TraceKind::Recovery(RecoveryStage::BackupRetrieval));
    }
    Ok(RetrievedBlocks {
        stamps: stamps.to_vec(),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_keeps_two_stamps() {
        let mut b = BackupStore::default();
        b.advance(0);
        b.store(1, 5, 0, 1.0);
        b.advance(1);
        b.store(1, 5, 1, 2.0);
        assert_eq!(b.stamps(), vec![0, 1]);
        b.advance(2);
        b.store(1, 5, 2, 3.0);
        assert_eq!(b.stamps(), vec![1, 2]);
        assert_eq!(b.get(1, 5, 0), None);
        // late copy of an evicted stamp is dropped
        b.store(1, 5, 0, 9.0);
        assert_eq!(b.get(1, 5, 0), None);
    }

    #[test]
    fn entries_are_per_owner() {
        let mut b = BackupStore::default();
        b.advance(3);
        b.store(2, 7, 3, 1.0);
        b.store(1, 4, 3, 2.0);
        b.store(2, 6, 3, 3.0);
        assert_eq!(b.entries_of(2, 3), vec![(6, 3.0), (7, 1.0)]);
        assert_eq!(b.len(), 3);
    }
}
