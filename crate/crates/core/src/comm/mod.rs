//! Deterministic simulated cluster.
//!
//! Every node has a context (liveness, incarnation, backup store). Messages
//! travel over per-ordered-pair FIFO channels; reductions are registered in a
//! table and complete once every participant has contributed. Nothing runs
//! concurrently: the solver driver walks the nodes in rank order, which makes
//! message traces and floating-point reduction results reproducible bit for
//! bit. Failures are injected from a script and reported to every survivor at
//! once.

mod script;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::redundancy::BackupStore;
use crate::sparse::{DistributedVector, Role};

pub use script::{FailureEvent, FailureScript, Phase, Trigger};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("delivery from {from} to failed node {to}")]
    DeliveryFailure { from: usize, to: usize },
    #[error("node {0} has failed and cannot communicate")]
    NodeDown(usize),
    #[error("nothing to receive at node {at} from node {from}")]
    Empty { at: usize, from: usize },
    #[error("collective aborted: nodes {0:?} have failed")]
    PeerFailed(Vec<usize>),
    #[error("reduction {id} failed: nodes {failed:?} dropped out")]
    ReductionFailed { id: u64, failed: Vec<usize> },
    #[error("reduction {id} still waiting for nodes {missing:?}")]
    ReductionIncomplete { id: u64, missing: Vec<usize> },
    #[error("unknown reduction {0}")]
    UnknownReduction(u64),
    #[error("reduction {id}: contribution of length {got}, expected {expected}")]
    LengthMismatch { id: u64, got: usize, expected: usize },
    #[error("node {0} is live; only failed ranks can be replaced")]
    NotFailed(usize),
    #[error("rank {0} outside the cluster")]
    BadRank(usize),
    #[error("no surviving node holds the requested data")]
    NoSurvivors,
    #[error("node {node} is missing remote element {index} during SpMV")]
    MissingHalo { node: usize, index: usize },
    #[error("unexpected payload at node {at} from node {from}")]
    UnexpectedPayload { at: usize, from: usize },
    #[error("invalid failure script: {0}")]
    BadScript(String),
}

impl CommError {
    /// True for errors that signal a node failure rather than a driver bug.
    pub fn is_failure_notice(&self) -> bool {
        matches!(
            self,
            CommError::DeliveryFailure { .. }
                | CommError::PeerFailed(_)
                | CommError::ReductionFailed { .. }
        )
    }
}

/// One section of an SpMV message: the elements of a single vector stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct HaloSection {
    pub stamp: i64,
    /// Elements the receiver needs for its rows.
    pub pattern: Vec<(usize, f64)>,
    /// Extra copies kept only for redundancy.
    pub redundant: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Halo { role: Role, sections: Vec<HaloSection> },
    Block { role: Role, stamp: i64, first_row: usize, values: Vec<f64> },
    Backup { owner: usize, stamp: i64, entries: Vec<(usize, f64)> },
    Bytes(Vec<u8>),
}

impl Payload {
    /// (need-driven elements, redundancy or recovery elements)
    fn element_counts(&self) -> (usize, usize) {
        match self {
            Payload::Halo { sections, .. } => {
                let mut pattern = 0;
                let mut extra = 0;
                for (k, s) in sections.iter().enumerate() {
                    if k == 0 {
                        pattern += s.pattern.len();
                    } else {
                        extra += s.pattern.len();
                    }
                    extra += s.redundant.len();
                }
                (pattern, extra)
            }
            Payload::Block { values, .. } => (0, values.len()),
            Payload::Backup { entries, .. } => (0, entries.len()),
            Payload::Bytes(b) => (b.len(), 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStage {
    GatherIssued,
    StaticReload,
    GatherComplete,
    BackupRetrieval,
    LocalWork,
    ReplacementExchange,
    Resume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send { to: usize, elements: usize },
    Recv { from: usize },
    ReductionStart { id: u64 },
    ReductionWait { id: u64 },
    PrecondApply { stamp: i64 },
    Spmv { stamp: i64 },
    Failure,
    Replacement,
    Recovery(RecoveryStage),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub node: usize,
    pub kind: TraceKind,
}

/// Element and message counts, accumulated over the lifetime of a cluster.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounters {
    pub messages: u64,
    /// Elements sent because the receiving rows need them.
    pub pattern_elements: u64,
    /// Elements sent only to keep redundant copies.
    pub redundant_elements: u64,
    /// Elements moved during recovery (gathers, backup retrieval, exchanges).
    pub recovery_elements: u64,
    pub reductions: u64,
    pub spmv_exchanges: u64,
    /// Largest number of redundant elements one node sent in one SpMV exchange.
    pub max_redundant_per_node_exchange: u64,
}

#[derive(Debug)]
struct NodeContext {
    live: bool,
    incarnation: u32,
    backup: BackupStore,
}

#[derive(Debug)]
struct PendingReduction {
    participants: BTreeSet<usize>,
    contributions: BTreeMap<usize, Vec<f64>>,
    waited: BTreeSet<usize>,
    result: Option<Vec<f64>>,
    failed: Vec<usize>,
}

/// Handle returned by [`ClusterSim::iallreduce_sum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReductionHandle {
    pub id: u64,
    pub node: usize,
}

#[derive(Clone, Debug)]
struct ScheduledFailure {
    iteration: usize,
    phase: Phase,
    victims: Vec<usize>,
    fired: bool,
}

pub struct ClusterSim {
    nodes: Vec<NodeContext>,
    channels: BTreeMap<(usize, usize), VecDeque<Payload>>,
    reductions: BTreeMap<u64, PendingReduction>,
    next_reduction: Vec<u64>,
    schedule: Vec<ScheduledFailure>,
    notices: BTreeSet<usize>,
    step: u64,
    trace: Option<Vec<TraceEvent>>,
    counters: CommCounters,
    recovering: bool,
}

impl ClusterSim {
    pub fn new(nodes: usize) -> Self {
        ClusterSim {
            nodes: (0..nodes)
                .map(|_| NodeContext {
                    live: true,
                    incarnation: 0,
                    backup: BackupStore::default(),
                })
                .collect(),
            channels: BTreeMap::new(),
            reductions: BTreeMap::new(),
            next_reduction: vec![0; nodes],
            schedule: Vec::new(),
            notices: BTreeSet::new(),
            step: 0,
            trace: None,
            counters: CommCounters::default(),
            recovering: false,
        }
    }

    /// Enables recording of every communication and solver event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_live(&self, rank: usize) -> bool {
        self.nodes.get(rank).is_some_and(|n| n.live)
    }

    pub fn live_ranks(&self) -> Vec<usize> {
        (0..self.nodes()).filter(|&r| self.nodes[r].live).collect()
    }

    pub fn failed_ranks(&self) -> Vec<usize> {
        (0..self.nodes()).filter(|&r| !self.nodes[r].live).collect()
    }

    pub fn incarnation(&self, rank: usize) -> u32 {
        self.nodes[rank].incarnation
    }

    pub fn counters(&self) -> &CommCounters {
        &self.counters
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn backup(&self, rank: usize) -> &BackupStore {
        &self.nodes[rank].backup
    }

    pub fn backup_mut(&mut self, rank: usize) -> &mut BackupStore {
        &mut self.nodes[rank].backup
    }

    /// Records a solver-level event in the trace.
    pub fn record(&mut self, node: usize, kind: TraceKind) {
        self.step += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                step: self.step,
                node,
                kind,
            });
        }
    }

    pub(crate) fn set_recovering(&mut self, on: bool) {
        self.recovering = on;
    }

    pub(crate) fn note_exchange(&mut self, redundant_per_node: &[u64]) {
        self.counters.spmv_exchanges += 1;
        if let Some(&m) = redundant_per_node.iter().max() {
            self.counters.max_redundant_per_node_exchange =
                self.counters.max_redundant_per_node_exchange.max(m);
        }
    }

    fn check_rank(&self, rank: usize) -> Result<(), CommError> {
        if rank < self.nodes() {
            Ok(())
        } else {
            Err(CommError::BadRank(rank))
        }
    }

    /// Point-to-point send. Sending to a failed node raises a delivery failure
    /// at the sender.
    pub fn send(&mut self, from: usize, to: usize, payload: Payload) -> Result<(), CommError> {
        self.check_rank(from)?;
        self.check_rank(to)?;
        if !self.nodes[from].live {
            return Err(CommError::NodeDown(from));
        }
        if !self.nodes[to].live {
            return Err(CommError::DeliveryFailure { from, to });
        }
        let (pattern, extra) = payload.element_counts();
        self.counters.messages += 1;
        if self.recovering {
            self.counters.recovery_elements += (pattern + extra) as u64;
        } else {
            self.counters.pattern_elements += pattern as u64;
            self.counters.redundant_elements += extra as u64;
        }
        self.record(
            from,
            TraceKind::Send {
                to,
                elements: pattern + extra,
            },
        );
        self.channels.entry((from, to)).or_default().push_back(payload);
        Ok(())
    }

    /// Takes the oldest message on the `(from, at)` channel.
    pub fn recv(&mut self, at: usize, from: usize) -> Result<Payload, CommError> {
        self.check_rank(at)?;
        self.check_rank(from)?;
        if !self.nodes[at].live {
            return Err(CommError::NodeDown(at));
        }
        let payload = self
            .channels
            .get_mut(&(from, at))
            .and_then(VecDeque::pop_front)
            .ok_or(CommError::Empty { at, from })?;
        self.record(at, TraceKind::Recv { from });
        Ok(payload)
    }

    /// Starts this node's next non-blocking sum reduction.
    ///
    /// Reductions are matched by per-node sequence number, so the k-th call
    /// on every node joins the same reduction.
    pub fn iallreduce_sum(
        &mut self,
        node: usize,
        values: Vec<f64>,
    ) -> Result<ReductionHandle, CommError> {
        self.check_rank(node)?;
        if !self.nodes[node].live {
            return Err(CommError::NodeDown(node));
        }
        let id = self.next_reduction[node];
        self.next_reduction[node] += 1;
        let live: BTreeSet<usize> = self.live_ranks().into_iter().collect();
        let entry = self.reductions.entry(id).or_insert_with(|| PendingReduction {
            participants: live,
            contributions: BTreeMap::new(),
            waited: BTreeSet::new(),
            result: None,
            failed: Vec::new(),
        });
        if let Some(first) = entry.contributions.values().next() {
            if first.len() != values.len() {
                return Err(CommError::LengthMismatch {
                    id,
                    got: values.len(),
                    expected: first.len(),
                });
            }
        }
        entry.contributions.insert(node, values);
        self.record(node, TraceKind::ReductionStart { id });
        Ok(ReductionHandle { id, node })
    }

    /// Completes a reduction on one node.
    ///
    /// Returns the elementwise sum of all contributions, combined along a
    /// fixed binary tree over ranks, or a failure notice if any participant
    /// died before the reduction completed everywhere.
    pub fn wait(&mut self, handle: ReductionHandle) -> Result<Vec<f64>, CommError> {
        let id = handle.id;
        let entry = self
            .reductions
            .get_mut(&id)
            .ok_or(CommError::UnknownReduction(id))?;
        if !entry.failed.is_empty() {
            let failed = entry.failed.clone();
            entry.waited.insert(handle.node);
            return Err(CommError::ReductionFailed { id, failed });
        }
        if entry.result.is_none() {
            let missing: Vec<usize> = entry
                .participants
                .iter()
                .copied()
                .filter(|r| !entry.contributions.contains_key(r))
                .collect();
            if !missing.is_empty() {
                return Err(CommError::ReductionIncomplete { id, missing });
            }
            let parts: Vec<&Vec<f64>> = entry.contributions.values().collect();
            let width = parts[0].len();
            let sums = (0..width)
                .map(|k| {
                    let column: Vec<f64> = parts.iter().map(|p| p[k]).collect();
                    tree_sum(&column)
                })
                .collect();
            entry.result = Some(sums);
            self.counters.reductions += 1;
        }
        entry.waited.insert(handle.node);
        let result = entry.result.clone().expect("result computed above");
        if entry.waited.is_superset(&entry.participants) {
            self.reductions.remove(&id);
        }
        self.record(handle.node, TraceKind::ReductionWait { id });
        Ok(result)
    }

    /// Blocking allreduce over all live nodes, one contribution per rank.
    pub fn allreduce_sum(&mut self, contributions: Vec<Vec<f64>>) -> Result<Vec<f64>, CommError> {
        let live = self.live_ranks();
        if live.len() != self.nodes() {
            return Err(CommError::PeerFailed(self.failed_ranks()));
        }
        let handles = contributions
            .into_iter()
            .enumerate()
            .map(|(r, v)| self.iallreduce_sum(r, v))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::new();
        for h in handles {
            out = self.wait(h)?;
        }
        Ok(out)
    }

    /// Installs the failure schedule. Progress triggers must already be
    /// resolved to iterations (see [`FailureScript::resolve`]).
    pub fn set_failure_script(&mut self, script: &FailureScript) -> Result<(), CommError> {
        let mut schedule = Vec::new();
        for e in &script.events {
            let iteration = match e.trigger {
                Trigger::Iteration(i) => i,
                Trigger::Progress(_) => {
                    return Err(CommError::BadScript(
                        "progress trigger must be resolved before scheduling".into(),
                    ))
                }
            };
            if let Some(&r) = e.victims.iter().find(|&&r| r >= self.nodes()) {
                return Err(CommError::BadRank(r));
            }
            schedule.push(ScheduledFailure {
                iteration,
                phase: e.phase,
                victims: e.victims.clone(),
                fired: false,
            });
        }
        self.schedule = schedule;
        Ok(())
    }

    /// Returns the victims of a scheduled failure at this point, if any,
    /// without injecting it.
    pub fn due_failure(&self, iteration: usize, phase: Phase) -> Option<Vec<usize>> {
        self.schedule
            .iter()
            .find(|f| !f.fired && f.iteration == iteration && f.phase == phase)
            .map(|f| f.victims.clone())
    }

    /// Fires the scheduled failure at this point, if any. Returns the victims.
    pub fn fire_scheduled(&mut self, iteration: usize, phase: Phase) -> Option<Vec<usize>> {
        let idx = self
            .schedule
            .iter()
            .position(|f| !f.fired && f.iteration == iteration && f.phase == phase)?;
        self.schedule[idx].fired = true;
        let victims = self.schedule[idx].victims.clone();
        self.inject_failure(&victims).ok()?;
        Some(victims)
    }

    /// Like [`Self::fire_scheduled`] for any iteration in `lo..=hi`; used by
    /// solvers that advance two iterations per step.
    pub fn fire_scheduled_in(&mut self, lo: usize, hi: usize, phase: Phase) -> Option<Vec<usize>> {
        let idx = self
            .schedule
            .iter()
            .position(|f| !f.fired && (lo..=hi).contains(&f.iteration) && f.phase == phase)?;
        self.schedule[idx].fired = true;
        let victims = self.schedule[idx].victims.clone();
        self.inject_failure(&victims).ok()?;
        Some(victims)
    }

    /// Kills the given nodes: their contexts, channels and backups are
    /// discarded, pending reductions involving them fail, and every survivor
    /// is notified.
    pub fn inject_failure(&mut self, victims: &[usize]) -> Result<(), CommError> {
        for &v in victims {
            self.check_rank(v)?;
        }
        for &v in victims {
            let node = &mut self.nodes[v];
            node.live = false;
            node.backup = BackupStore::default();
            self.channels.retain(|&(a, b), _| a != v && b != v);
            self.notices.insert(v);
            self.record(v, TraceKind::Failure);
        }
        for entry in self.reductions.values_mut() {
            let hit: Vec<usize> = victims
                .iter()
                .copied()
                .filter(|v| entry.participants.contains(v))
                .collect();
            if !hit.is_empty() {
                entry.failed.extend(hit);
            }
        }
        Ok(())
    }

    /// Failed ranks that survivors have been told about but not yet handled.
    pub fn pending_notices(&self) -> Vec<usize> {
        self.notices.iter().copied().collect()
    }

    /// Clears failure notices and drops reductions that can never complete.
    pub fn acknowledge_failures(&mut self) -> Vec<usize> {
        self.reductions.retain(|_, e| e.failed.is_empty());
        std::mem::take(&mut self.notices).into_iter().collect()
    }

    /// Brings up a fresh node under a failed rank.
    pub fn spawn_replacement(&mut self, rank: usize) -> Result<NodeId, CommError> {
        self.check_rank(rank)?;
        if self.nodes[rank].live {
            return Err(CommError::NotFailed(rank));
        }
        let node = &mut self.nodes[rank];
        node.live = true;
        node.incarnation += 1;
        node.backup = BackupStore::default();
        let next = (0..self.nodes())
            .filter(|&r| r != rank)
            .map(|r| self.next_reduction[r])
            .max()
            .unwrap_or(0);
        self.next_reduction[rank] = next;
        self.record(rank, TraceKind::Replacement);
        Ok(NodeId(rank))
    }

    /// Sends every survivor's block of each requested vector to each
    /// replacement and assembles them there.
    ///
    /// Returns one full-length vector per request holding the complement
    /// entries, with zeros on the rows of `replacements`.
    pub fn gather_from_survivors(
        &mut self,
        replacements: &[usize],
        vectors: &[&DistributedVector],
    ) -> Result<Vec<Vec<f64>>, CommError> {
        let failed: BTreeSet<usize> = replacements.iter().copied().collect();
        let survivors: Vec<usize> = (0..self.nodes()).filter(|r| !failed.contains(r)).collect();
        if survivors.is_empty() {
            return Err(CommError::NoSurvivors);
        }
        if let Some(&r) = survivors.iter().find(|&&r| !self.nodes[r].live) {
            return Err(CommError::PeerFailed(vec![r]));
        }
        let lead = *replacements.first().ok_or(CommError::NoSurvivors)?;
        for &s in &survivors {
            for v in vectors {
                let range = v.partition().range(s);
                for &r in replacements {
                    self.send(
                        s,
                        r,
                        Payload::Block {
                            role: v.role(),
                            stamp: v.stamp(),
                            first_row: range.start,
                            values: v.block(s).to_vec(),
                        },
                    )?;
                }
            }
        }
        self.record(lead, TraceKind::Recovery(RecoveryStage::StaticReload));
        let n = vectors.first().map_or(0, |v| v.partition().n());
        let mut assembled = Vec::new();
        for &r in replacements {
            let mut mine = vec![vec![0.0; n]; vectors.len()];
            for &s in &survivors {
                for (k, v) in vectors.iter().enumerate() {
                    match self.recv(r, s)? {
                        Payload::Block {
                            role,
                            stamp,
                            first_row,
                            values,
                        } if role == v.role() && stamp == v.stamp() => {
                            mine[k][first_row..first_row + values.len()].copy_from_slice(&values);
                        }
                        _ => return Err(CommError::UnexpectedPayload { at: r, from: s }),
                    }
                }
            }
            if r == lead {
                assembled = mine;
            } else {
                debug_assert_eq!(assembled, mine);
            }
        }
        self.record(lead, TraceKind::Recovery(RecoveryStage::GatherComplete));
        Ok(assembled)
    }
}

/// Sum along a fixed balanced binary tree. Order depends only on the length.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n.div_ceil(2);
            tree_sum(&values[..mid]) + tree_sum(&values[mid..])
        }
    }
}
