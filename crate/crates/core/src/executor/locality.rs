//! Replica locations and slot-aware task placement.

use std::collections::BTreeSet;

use super::ExecError;
use crate::dataset::DatasetDescriptor;

pub type NodeId = String;

/// Partition index -> nodes holding a local replica; the simulated
/// name-node query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalityMap {
    holders: Vec<BTreeSet<NodeId>>,
}

impl LocalityMap {
    pub fn from_descriptor(desc: &DatasetDescriptor) -> Self {
        LocalityMap {
            holders: desc
                .partitions
                .iter()
                .map(|p| p.preferred_nodes.iter().cloned().collect())
                .collect(),
        }
    }

    pub fn with_partitions(count: usize) -> Self {
        LocalityMap {
            holders: vec![BTreeSet::new(); count],
        }
    }

    pub fn set_holders(&mut self, partition: usize, nodes: impl IntoIterator<Item = NodeId>) {
        self.holders[partition] = nodes.into_iter().collect();
    }

    pub fn holders(&self, partition: usize) -> impl Iterator<Item = &NodeId> {
        self.holders.get(partition).into_iter().flatten()
    }

    pub fn is_holder(&self, partition: usize, node: &str) -> bool {
        self.holders.get(partition).is_some_and(|h| h.contains(node))
    }

    pub fn partitions(&self) -> usize {
        self.holders.len()
    }

    pub fn is_consistent_with(&self, desc: &DatasetDescriptor) -> bool {
        *self == Self::from_descriptor(desc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSlots {
    pub id: NodeId,
    pub slots: usize,
    pub busy: usize,
}

impl NodeSlots {
    pub fn free(&self) -> usize {
        self.slots.saturating_sub(self.busy)
    }
}

/// Live nodes and their slot occupancy, kept sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerPool {
    nodes: Vec<NodeSlots>,
}

impl WorkerPool {
    pub fn new(nodes: impl IntoIterator<Item = (NodeId, usize)>) -> Self {
        let mut nodes: Vec<NodeSlots> = nodes
            .into_iter()
            .map(|(id, slots)| NodeSlots { id, slots, busy: 0 })
            .collect();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        WorkerPool { nodes }
    }

    pub fn nodes(&self) -> &[NodeSlots] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSlots> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn node_mut(&mut self, id: &str) -> Option<&mut NodeSlots> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn occupy(&mut self, id: &str) {
        if let Some(n) = self.node_mut(id) {
            n.busy += 1;
        }
    }

    pub fn release(&mut self, id: &str) {
        if let Some(n) = self.node_mut(id) {
            n.busy = n.busy.saturating_sub(1);
        }
    }

    pub fn remove(&mut self, id: &str) {
        self.nodes.retain(|n| n.id != id);
    }

    pub fn total_free(&self) -> usize {
        self.nodes.iter().map(NodeSlots::free).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub node: NodeId,
    pub local: bool,
}

fn least_loaded<'a>(candidates: impl Iterator<Item = &'a NodeSlots>) -> Option<&'a NodeSlots> {
    // min_by_key keeps the first minimum, and nodes are sorted by id
    candidates.filter(|n| n.free() > 0).min_by_key(|n| n.busy)
}

/// A least-loaded holder with a free slot (lowest id on ties); otherwise a
/// least-loaded non-holder, flagged non-local. `None` when every slot is
/// busy.
pub fn assign(
    partition: usize,
    map: &LocalityMap,
    pool: &WorkerPool,
) -> Result<Option<Assignment>, ExecError> {
    if pool.nodes.is_empty() {
        return Err(ExecError::Scheduling("worker pool is empty".into()));
    }
    if let Some(n) = least_loaded(pool.nodes.iter().filter(|n| map.is_holder(partition, &n.id))) {
        return Ok(Some(Assignment {
            node: n.id.clone(),
            local: true,
        }));
    }
    Ok(least_loaded(pool.nodes.iter().filter(|n| !map.is_holder(partition, &n.id))).map(|n| {
        Assignment {
            node: n.id.clone(),
            local: false,
        }
    }))
}

/// Dispatcher policy on top of [`assign`]: a task whose holders are alive
/// but busy waits for them instead of reading remotely. Remote reads
/// happen only for partitions with no live holder.
pub fn dispatch(
    partition: usize,
    map: &LocalityMap,
    pool: &WorkerPool,
) -> Result<Option<Assignment>, ExecError> {
    let holder_alive = pool.nodes.iter().any(|n| map.is_holder(partition, &n.id));
    match assign(partition, map, pool)? {
        Some(a) if !a.local && holder_alive => Ok(None),
        other => Ok(other),
    }
}
