use std::collections::BTreeMap;

use serde::Serialize;

use crate::sparse::{DistributedVector, Role};

/// All live solver vectors, keyed by role and iteration stamp.
#[derive(Clone, Debug, Default)]
pub struct VectorSet {
    map: BTreeMap<(Role, i64), DistributedVector>,
}

impl VectorSet {
    pub fn get(&self, role: Role, stamp: i64) -> &DistributedVector {
        self.map
            .get(&(role, stamp))
            .unwrap_or_else(|| panic!("vector {role}({stamp}) is not held"))
    }

    pub fn try_get(&self, role: Role, stamp: i64) -> Option<&DistributedVector> {
        self.map.get(&(role, stamp))
    }

    pub fn get_mut(&mut self, role: Role, stamp: i64) -> Option<&mut DistributedVector> {
        self.map.get_mut(&(role, stamp))
    }

    pub fn put(&mut self, v: DistributedVector) {
        self.map.insert((v.role(), v.stamp()), v);
    }

    pub fn contains(&self, role: Role, stamp: i64) -> bool {
        self.map.contains_key(&(role, stamp))
    }

    /// Destroys every block owned by the given ranks.
    pub fn lose(&mut self, ranks: &[usize]) {
        for v in self.map.values_mut() {
            for &r in ranks {
                v.lose(r);
            }
        }
    }

    /// Forgets stamps older than `stamp`.
    pub fn prune_before(&mut self, stamp: i64) {
        self.map.retain(|&(_, s), _| s >= stamp);
    }

    /// Forgets stamps newer than `stamp`.
    pub fn drop_after(&mut self, stamp: i64) {
        self.map.retain(|&(_, s), _| s <= stamp);
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn keys(&self) -> impl Iterator<Item = (Role, i64)> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DistributedVector> {
        self.map.values()
    }
}

/// Reduction results of one iteration. Every node holds the same values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scalars {
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub eta: f64,
    pub theta: f64,
    pub lambda: [f64; 8],
    /// squared norm used by the stopping test
    pub norm2: f64,
}

impl Default for Scalars {
    fn default() -> Self {
        Scalars {
            gamma: f64::NAN,
            delta: f64::NAN,
            alpha: f64::NAN,
            beta: f64::NAN,
            zeta: f64::NAN,
            eta: f64::NAN,
            theta: f64::NAN,
            lambda: [f64::NAN; 8],
            norm2: f64::NAN,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScalarLedger {
    entries: BTreeMap<i64, Scalars>,
}

impl ScalarLedger {
    pub fn at(&self, i: i64) -> Scalars {
        self.entries.get(&i).copied().unwrap_or_default()
    }

    pub fn entry(&mut self, i: i64) -> &mut Scalars {
        self.entries.entry(i).or_default()
    }

    pub fn drop_after(&mut self, i: i64) {
        self.entries.retain(|&k, _| k <= i);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
