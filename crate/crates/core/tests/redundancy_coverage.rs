mod common;

use std::collections::BTreeSet;

use common::{pattern_cases, random_spd, PatternCase};
use kp_core::comm::ClusterSim;
use kp_core::redundancy::{holders, RedundancyPlan, SendSets};
use kp_core::sparse::{DistributedMatrix, DistributedVector, Role};

fn setup(c: &PatternCase) -> (DistributedMatrix, RedundancyPlan) {
    let a = DistributedMatrix::distribute(random_spd(c.n, c.seed), c.nodes).unwrap();
    let plan = RedundancyPlan::build(&SendSets::compute(&a), c.n_redu).unwrap();
    (a, plan)
}

/// Runs two planned exchanges (stamps 0 and 1) and returns the elements
/// with fewer than `n_redu` non-owner copies at either stamp.
fn uncovered(a: &DistributedMatrix, plan: &RedundancyPlan) -> Vec<(usize, usize, i64)> {
    let mut cluster = ClusterSim::new(a.nodes());
    let part = a.partition().clone();
    for stamp in 0..2 {
        let v = DistributedVector::from_global(part.clone(), &vec![1.0; a.n()], Role::P, stamp);
        a.spmv(&mut cluster, &v, Some(plan), Role::S).unwrap();
    }
    let mut out = Vec::new();
    for j in 0..a.nodes() {
        for s in part.range(j) {
            for stamp in 0..2 {
                if holders(&cluster, j, s, stamp) < plan.n_redu() {
                    out.push((j, s, stamp));
                }
            }
        }
    }
    out
}

#[test]
fn every_element_has_n_redu_copies_in_both_stamps() {
    for c in pattern_cases() {
        let (a, plan) = setup(&c);
        let bad = uncovered(&a, &plan);
        assert!(bad.is_empty(), "seed {} nn {} n_redu {}: {:?}", c.seed, c.nodes, c.n_redu, &bad[..bad.len().min(5)]);
    }
}

#[test]
fn counted_copies_agree_with_stores() {
    for c in pattern_cases().into_iter().step_by(7) {
        let (a, plan) = setup(&c);
        let mut cluster = ClusterSim::new(a.nodes());
        let v = DistributedVector::from_global(a.partition().clone(), &vec![1.0; a.n()], Role::P, 0);
        a.spmv(&mut cluster, &v, Some(&plan), Role::S).unwrap();
        for j in 0..a.nodes() {
            for s in a.partition().range(j) {
                assert_eq!(plan.copies(j, s), holders(&cluster, j, s, 0));
            }
        }
    }
}

#[test]
fn every_redundant_element_is_necessary() {
    // first 10 patterns, all node counts and levels
    for c in pattern_cases().into_iter().filter(|c| c.seed < 10) {
        let (_, plan) = setup(&c);
        for j in 0..c.nodes {
            for k in 1..=c.n_redu {
                for &s in plan.redundant(j, k) {
                    let reduced = plan.without(j, k, s);
                    assert!(
                        reduced.copies(j, s) < c.n_redu,
                        "seed {} nn {} n_redu {}: element {s} of R_{j},{k} is not needed",
                        c.seed,
                        c.nodes,
                        c.n_redu
                    );
                }
            }
        }
    }
}

#[test]
fn redundant_volume_is_bounded_by_level_times_block() {
    for c in pattern_cases() {
        let (a, plan) = setup(&c);
        let block = c.n.div_ceil(c.nodes);
        let mut cluster = ClusterSim::new(c.nodes);
        let v = DistributedVector::from_global(a.partition().clone(), &vec![1.0; c.n], Role::P, 0);
        a.spmv(&mut cluster, &v, Some(&plan), Role::S).unwrap();
        let sent = cluster.counters().max_redundant_per_node_exchange as usize;
        assert!(sent <= c.n_redu * block, "seed {}: {sent} > {} x {block}", c.seed, c.n_redu);
        for j in 0..c.nodes {
            assert!(plan.redundant_volume(j) <= c.n_redu * block);
        }
    }
}

#[test]
fn redundant_sets_are_disjoint_from_pattern_to_same_target() {
    for c in pattern_cases().into_iter().step_by(5) {
        let (_, plan) = setup(&c);
        let sets = plan.send_sets();
        for j in 0..c.nodes {
            for k in 1..=c.n_redu {
                let pattern: BTreeSet<usize> = sets.send_set(j, plan.target(j, k)).iter().copied().collect();
                assert!(plan.redundant(j, k).iter().all(|s| !pattern.contains(s)));
            }
        }
    }
}
