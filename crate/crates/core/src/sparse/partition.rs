use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SparseError;

/// Contiguous block-row ownership of `n` rows by `nn` nodes.
///
/// The first `n % nn` nodes own `ceil(n / nn)` rows, the rest `floor(n / nn)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRowPartition {
    n: usize,
    offsets: Vec<usize>,
}

impl BlockRowPartition {
    pub fn new(n: usize, nn: usize) -> Result<Self, SparseError> {
        if nn == 0 || nn > n {
            return Err(SparseError::BadPartition { n, nodes: nn });
        }
        let base = n / nn;
        let extra = n % nn;
        let mut offsets = Vec::with_capacity(nn + 1);
        offsets.push(0);
        for j in 0..nn {
            let len = base + usize::from(j < extra);
            offsets.push(offsets[j] + len);
        }
        Ok(BlockRowPartition { n, offsets })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, node: usize) -> Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn len_of(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn max_block(&self) -> usize {
        (0..self.nodes()).map(|j| self.len_of(j)).max().unwrap_or(0)
    }

    /// Owning node of a global row.
    pub fn owner(&self, row: usize) -> usize {
        debug_assert!(row < self.n);
        // offsets is sorted; the owner is the last offset <= row.
        self.offsets.partition_point(|&o| o <= row) - 1
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.nodes()).map(|j| self.range(j))
    }
}

/// Sorted union of the row ranges owned by a set of nodes.
///
/// This is the failed index set when several nodes fail together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowSet {
    nodes: Vec<usize>,
    ranges: Vec<Range<usize>>,
    n: usize,
}

impl RowSet {
    pub fn of_nodes(partition: &BlockRowPartition, nodes: &[usize]) -> Self {
        let mut nodes = nodes.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        let ranges = nodes.iter().map(|&j| partition.range(j)).collect();
        RowSet {
            nodes,
            ranges,
            n: partition.n(),
        }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global row indices in ascending order.
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    /// Local position of each global row, `None` for rows outside the set.
    pub fn local_index(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.n];
        for (k, row) in self.rows().enumerate() {
            map[row] = Some(k);
        }
        map
    }

    pub fn contains(&self, row: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&row))
    }

    /// Restricts a full-length vector to the set.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.rows().map(|r| full[r]).collect()
    }

    /// Writes set-local values back into a full-length vector.
    pub fn scatter(&self, local: &[f64], full: &mut [f64]) {
        for (k, r) in self.rows().enumerate() {
            full[r] = local[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(p: &BlockRowPartition) -> Vec<Range<usize>> {
        p.ranges().collect()
    }

    #[test]
    fn even_split() {
        let p = BlockRowPartition::new(8, 4).unwrap();
        assert_eq!(ranges(&p), vec![0..2, 2..4, 4..6, 6..8]);
    }

    #[test]
    fn larger_blocks_first() {
        let p = BlockRowPartition::new(7, 3).unwrap();
        assert_eq!(ranges(&p), vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn singletons() {
        let p = BlockRowPartition::new(5, 5).unwrap();
        assert_eq!(ranges(&p), (0..5).map(|i| i..i + 1).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_nodes_rejected() {
        assert!(BlockRowPartition::new(3, 4).is_err());
        assert!(BlockRowPartition::new(3, 0).is_err());
    }

    #[test]
    fn owner_lookup() {
        let p = BlockRowPartition::new(7, 3).unwrap();
        let owners: Vec<usize> = (0..7).map(|r| p.owner(r)).collect();
        assert_eq!(owners, vec![0, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn rowset_union() {
        let p = BlockRowPartition::new(8, 4).unwrap();
        let s = RowSet::of_nodes(&p, &[3, 1]);
        assert_eq!(s.rows().collect::<Vec<_>>(), vec![2, 3, 6, 7]);
        let full: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(s.restrict(&full), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(s.local_index()[6], Some(2));
    }

    proptest::proptest! {
        #[test]
        fn cover_is_contiguous_and_balanced(n in 1usize..500, nn in 1usize..64) {
            proptest::prop_assume!(nn <= n);
            let p = BlockRowPartition::new(n, nn).unwrap();
            let mut next = 0;
            for r in p.ranges() {
                proptest::prop_assert_eq!(r.start, next);
                next = r.end;
            }
            proptest::prop_assert_eq!(next, n);
            let sizes: Vec<usize> = (0..nn).map(|j| p.len_of(j)).collect();
            let max = *sizes.iter().max().unwrap();
            let min = *sizes.iter().min().unwrap();
            proptest::prop_assert!(max - min <= 1);
            proptest::prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
