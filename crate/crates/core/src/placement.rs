//! Greedy replica placement on the edge cluster.
//!
//! All four policies place one replica at a time and recompute remaining
//! capacity after each one. A plan is built against a scratch copy of the
//! free capacities, so a step whose replicas do not all fit leaves no trace.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ResourceVector, StepSpec};

/// Largest instance `oracle_feasible` will search exhaustively.
pub const ORACLE_MAX_REPLICAS: u32 = 12;
pub const ORACLE_MAX_NODES: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is dead")]
    DeadNode(usize),
    #[error("applying plan would exceed capacity of node {node}: {allocated} + {demand} > {capacity}")]
    CapacityExceeded {
        node: usize,
        allocated: ResourceVector,
        demand: ResourceVector,
        capacity: ResourceVector,
    },
    #[error("releasing plan would drive node {node} allocation negative ({allocated} - {demand})")]
    ReleaseUnderflow {
        node: usize,
        allocated: ResourceVector,
        demand: ResourceVector,
    },
    #[error("oracle instance too large: {replicas} replicas on {nodes} nodes")]
    OracleTooLarge { replicas: u32, nodes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: usize,
    pub capacity: ResourceVector,
    pub allocated: ResourceVector,
    pub alive: bool,
}

impl NodeState {
    pub fn new(node_id: usize, capacity: ResourceVector) -> Self {
        Self {
            node_id,
            capacity,
            allocated: ResourceVector::ZERO,
            alive: true,
        }
    }

    pub fn free(&self) -> ResourceVector {
        self.capacity
            .checked_sub(&self.allocated)
            .expect("node allocation exceeds capacity")
    }
}

/// Builds `count` identical, empty, alive nodes.
pub fn uniform_cluster(count: usize, capacity: ResourceVector) -> Vec<NodeState> {
    (0..count).map(|i| NodeState::new(i, capacity)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum PlacementPolicy {
    #[default]
    #[serde(rename = "ff")]
    FirstFit,
    #[serde(rename = "bf")]
    BestFit,
    #[serde(rename = "rr")]
    RoundRobin,
    #[serde(rename = "wf")]
    WorstFit,
}

impl PlacementPolicy {
    pub const ALL: [PlacementPolicy; 4] = [
        PlacementPolicy::FirstFit,
        PlacementPolicy::BestFit,
        PlacementPolicy::RoundRobin,
        PlacementPolicy::WorstFit,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            PlacementPolicy::FirstFit => "ff",
            PlacementPolicy::BestFit => "bf",
            PlacementPolicy::RoundRobin => "rr",
            PlacementPolicy::WorstFit => "wf",
        }
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for PlacementPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ff" => Ok(PlacementPolicy::FirstFit),
            "bf" => Ok(PlacementPolicy::BestFit),
            "rr" => Ok(PlacementPolicy::RoundRobin),
            "wf" => Ok(PlacementPolicy::WorstFit),
            other => Err(format!("unknown placement policy `{other}` (expected ff, bf, rr or wf)")),
        }
    }
}

/// Replica-to-node assignment for one step. Only exists when every replica
/// was assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub demand_per_replica: ResourceVector,
    pub assignments: BTreeMap<u32, usize>,
}

impl PlacementPlan {
    pub fn empty(demand_per_replica: ResourceVector) -> Self {
        Self {
            demand_per_replica,
            assignments: BTreeMap::new(),
        }
    }

    /// Total demand the plan puts on each node it touches.
    pub fn per_node_demand(&self) -> BTreeMap<usize, ResourceVector> {
        let mut out: BTreeMap<usize, ResourceVector> = BTreeMap::new();
        for &node in self.assignments.values() {
            let entry = out.entry(node).or_default();
            *entry = *entry + self.demand_per_replica;
        }
        out
    }

    pub fn touches(&self, node_id: usize) -> bool {
        self.assignments.values().any(|&n| n == node_id)
    }
}

fn pick_node(
    free: &[ResourceVector],
    alive: &[bool],
    demand: &ResourceVector,
    policy: PlacementPolicy,
    cursor: &mut usize,
) -> Option<usize> {
    let n = free.len();
    let fits = |i: usize| alive[i] && demand.fits_within(&free[i]);
    match policy {
        PlacementPolicy::FirstFit => (0..n).find(|&i| fits(i)),
        // Ties go to the lowest index: min_by_key / max_by_key with a
        // reversed index keep the first of equal keys.
        PlacementPolicy::BestFit => (0..n)
            .filter(|&i| fits(i))
            .min_by_key(|&i| (free[i].cpu_millicores, free[i].memory_mb, i)),
        PlacementPolicy::WorstFit => (0..n)
            .filter(|&i| fits(i))
            .max_by_key(|&i| (free[i].cpu_millicores, free[i].memory_mb, std::cmp::Reverse(i))),
        PlacementPolicy::RoundRobin => {
            if n == 0 {
                return None;
            }
            let found = (0..n).map(|k| (*cursor + k) % n).find(|&i| fits(i))?;
            *cursor = (found + 1) % n;
            Some(found)
        }
    }
}

/// Places every replica of `step` or nothing. On success returns the plan and
/// the advanced round-robin cursor; the cursor only moves for `RoundRobin`.
pub fn try_place(
    step: &StepSpec,
    nodes: &[NodeState],
    policy: PlacementPolicy,
    rr_cursor: usize,
) -> Option<(PlacementPlan, usize)> {
    try_place_replicas(step.demand_per_replica, step.replicas, nodes, policy, rr_cursor)
}

pub fn try_place_replicas(
    demand: ResourceVector,
    replicas: u32,
    nodes: &[NodeState],
    policy: PlacementPolicy,
    rr_cursor: usize,
) -> Option<(PlacementPlan, usize)> {
    let mut free: Vec<ResourceVector> = nodes.iter().map(NodeState::free).collect();
    let alive: Vec<bool> = nodes.iter().map(|n| n.alive).collect();
    let mut cursor = if nodes.is_empty() { 0 } else { rr_cursor % nodes.len() };
    let mut plan = PlacementPlan::empty(demand);
    for replica in 0..replicas {
        let idx = pick_node(&free, &alive, &demand, policy, &mut cursor)?;
        free[idx] = free[idx].checked_sub(&demand).ok()?;
        plan.assignments.insert(replica, nodes[idx].node_id);
    }
    Some((plan, cursor))
}

fn node_index(nodes: &[NodeState], node_id: usize) -> Result<usize, PlacementError> {
    nodes
        .iter()
        .position(|n| n.node_id == node_id)
        .ok_or(PlacementError::UnknownNode(node_id))
}

/// Adds the plan's demand to the nodes it touches. Checks every node first,
/// so a failing plan mutates nothing.
pub fn apply_plan(plan: &PlacementPlan, nodes: &mut [NodeState]) -> Result<(), PlacementError> {
    let per_node = plan.per_node_demand();
    let mut updates = Vec::with_capacity(per_node.len());
    for (&node_id, demand) in &per_node {
        let idx = node_index(nodes, node_id)?;
        let node = &nodes[idx];
        if !node.alive {
            return Err(PlacementError::DeadNode(node_id));
        }
        let next = node.allocated + *demand;
        if !next.fits_within(&node.capacity) {
            return Err(PlacementError::CapacityExceeded {
                node: node_id,
                allocated: node.allocated,
                demand: *demand,
                capacity: node.capacity,
            });
        }
        updates.push((idx, next));
    }
    for (idx, next) in updates {
        nodes[idx].allocated = next;
    }
    Ok(())
}

/// Inverse of [`apply_plan`].
pub fn release(plan: &PlacementPlan, nodes: &mut [NodeState]) -> Result<(), PlacementError> {
    let per_node = plan.per_node_demand();
    let mut updates = Vec::with_capacity(per_node.len());
    for (&node_id, demand) in &per_node {
        let idx = node_index(nodes, node_id)?;
        let node = &nodes[idx];
        let next = node
            .allocated
            .checked_sub(demand)
            .map_err(|_| PlacementError::ReleaseUnderflow {
                node: node_id,
                allocated: node.allocated,
                demand: *demand,
            })?;
        updates.push((idx, next));
    }
    for (idx, next) in updates {
        nodes[idx].allocated = next;
    }
    Ok(())
}

/// Exhaustive feasibility check for small instances: is there any
/// assignment of the step's replicas to alive nodes within capacity?
///
/// Replicas are interchangeable, so only non-decreasing node sequences are
/// enumerated.
pub fn oracle_feasible(step: &StepSpec, nodes: &[NodeState]) -> Result<bool, PlacementError> {
    if step.replicas > ORACLE_MAX_REPLICAS || nodes.len() > ORACLE_MAX_NODES {
        return Err(PlacementError::OracleTooLarge {
            replicas: step.replicas,
            nodes: nodes.len(),
        });
    }

    fn search(remaining: u32, start: usize, free: &mut [ResourceVector], alive: &[bool], demand: &ResourceVector) -> bool {
        if remaining == 0 {
            return true;
        }
        for i in start..free.len() {
            if !alive[i] || !demand.fits_within(&free[i]) {
                continue;
            }
            let before = free[i];
            free[i] = before.checked_sub(demand).expect("checked by fits_within");
            let ok = search(remaining - 1, i, free, alive, demand);
            free[i] = before;
            if ok {
                return true;
            }
        }
        false
    }

    let mut free: Vec<ResourceVector> = nodes.iter().map(NodeState::free).collect();
    let alive: Vec<bool> = nodes.iter().map(|n| n.alive).collect();
    Ok(search(step.replicas, 0, &mut free, &alive, &step.demand_per_replica))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(cpu: u64, mem: u64, replicas: u32) -> StepSpec {
        StepSpec::new("s", ResourceVector::new(cpu, mem), replicas, 1.0)
    }

    fn nodes_with_free(frees: &[(u64, u64)]) -> Vec<NodeState> {
        frees
            .iter()
            .enumerate()
            .map(|(i, &(c, m))| NodeState::new(i, ResourceVector::new(c, m)))
            .collect()
    }

    fn targets(plan: &PlacementPlan) -> Vec<usize> {
        plan.assignments.values().copied().collect()
    }

    #[test]
    fn first_fit_packs_lowest_node() {
        let nodes = nodes_with_free(&[(4000, 8192), (4000, 8192)]);
        let (plan, _) = try_place(&step(1000, 0, 2), &nodes, PlacementPolicy::FirstFit, 0).unwrap();
        assert_eq!(targets(&plan), vec![0, 0]);
    }

    #[test]
    fn worst_fit_spreads() {
        let nodes = nodes_with_free(&[(4000, 8192), (4000, 8192)]);
        let (plan, _) = try_place(&step(1000, 0, 2), &nodes, PlacementPolicy::WorstFit, 0).unwrap();
        assert_eq!(targets(&plan), vec![0, 1]);
    }

    #[test]
    fn best_fit_picks_tightest() {
        let nodes = nodes_with_free(&[(4000, 512), (1000, 512)]);
        let (plan, _) = try_place(&step(1000, 0, 1), &nodes, PlacementPolicy::BestFit, 0).unwrap();
        assert_eq!(targets(&plan), vec![1]);
    }

    #[test]
    fn best_fit_breaks_cpu_ties_on_memory() {
        let nodes = nodes_with_free(&[(2000, 900), (2000, 300), (2000, 300)]);
        let (plan, _) = try_place(&step(1000, 100, 1), &nodes, PlacementPolicy::BestFit, 0).unwrap();
        assert_eq!(targets(&plan), vec![1]);
        let (plan, _) = try_place(&step(1000, 100, 1), &nodes, PlacementPolicy::WorstFit, 0).unwrap();
        assert_eq!(targets(&plan), vec![0]);
    }

    #[test]
    fn oversized_replica_is_infeasible_everywhere() {
        let nodes = nodes_with_free(&[(4000, 8192), (4000, 8192)]);
        for policy in PlacementPolicy::ALL {
            assert!(try_place(&step(5000, 0, 1), &nodes, policy, 0).is_none());
        }
    }

    #[test]
    fn round_robin_cycles_and_skips() {
        let mut nodes = uniform_cluster(3, ResourceVector::new(4000, 4096));
        let mut cursor = 0;
        let mut seen = Vec::new();
        for _ in 0..7 {
            let (plan, next) = try_place(&step(100, 0, 1), &nodes, PlacementPolicy::RoundRobin, cursor).unwrap();
            cursor = next;
            seen.extend(targets(&plan));
        }
        assert_eq!(seen, vec![0, 1, 2, 0, 1, 2, 0]);

        nodes[1].alive = false;
        let (plan, next) = try_place(&step(100, 0, 3), &nodes, PlacementPolicy::RoundRobin, 1).unwrap();
        assert_eq!(targets(&plan), vec![2, 0, 2]);
        assert_eq!(next, 0);
    }

    #[test]
    fn failed_placement_keeps_cursor_and_nodes() {
        let nodes = nodes_with_free(&[(1000, 100), (1000, 100)]);
        let before = nodes.clone();
        assert!(try_place(&step(1000, 10, 3), &nodes, PlacementPolicy::RoundRobin, 1).is_none());
        assert_eq!(nodes, before);
    }

    #[test]
    fn dead_nodes_are_never_used() {
        let mut nodes = nodes_with_free(&[(4000, 4096), (4000, 4096)]);
        nodes[0].alive = false;
        for policy in PlacementPolicy::ALL {
            let (plan, _) = try_place(&step(1000, 0, 3), &nodes, policy, 0).unwrap();
            assert!(targets(&plan).iter().all(|&n| n == 1));
        }
    }

    #[test]
    fn apply_and_release() {
        let mut nodes = uniform_cluster(2, ResourceVector::new(4000, 4096));
        let original = nodes.clone();
        apply_plan(&PlacementPlan::empty(ResourceVector::new(1000, 0)), &mut nodes).unwrap();
        assert_eq!(nodes, original);

        let plan = PlacementPlan {
            demand_per_replica: ResourceVector::new(1000, 0),
            assignments: BTreeMap::from([(0, 0), (1, 0)]),
        };
        apply_plan(&plan, &mut nodes).unwrap();
        assert_eq!(nodes[0].allocated, ResourceVector::new(2000, 0));
        assert_eq!(nodes[1].allocated, ResourceVector::ZERO);
        release(&plan, &mut nodes).unwrap();
        assert_eq!(nodes, original);
        assert!(matches!(release(&plan, &mut nodes), Err(PlacementError::ReleaseUnderflow { .. })));
        assert_eq!(nodes, original);
    }

    #[test]
    fn apply_rejects_overcommit_atomically() {
        let mut nodes = uniform_cluster(2, ResourceVector::new(2000, 4096));
        let plan = PlacementPlan {
            demand_per_replica: ResourceVector::new(1500, 0),
            assignments: BTreeMap::from([(0, 0), (1, 1), (2, 1)]),
        };
        assert!(matches!(apply_plan(&plan, &mut nodes), Err(PlacementError::CapacityExceeded { node: 1, .. })));
        assert!(nodes.iter().all(|n| n.allocated.is_zero()));
    }

    #[test]
    fn oracle_examples() {
        let nodes = nodes_with_free(&[(500, 100), (1200, 100)]);
        assert!(oracle_feasible(&step(1000, 10, 1), &nodes).unwrap());
        assert!(!oracle_feasible(&step(1000, 10, 2), &nodes).unwrap());

        // Total free equals total demand, but no node holds two replicas.
        let nodes = nodes_with_free(&[(1500, 1000), (1500, 1000)]);
        assert!(!oracle_feasible(&step(1000, 0, 3), &nodes).unwrap());

        let big = uniform_cluster(7, ResourceVector::new(1, 1));
        assert!(matches!(oracle_feasible(&step(1, 1, 1), &big), Err(PlacementError::OracleTooLarge { .. })));
    }

    fn arb_nodes() -> impl Strategy<Value = Vec<NodeState>> {
        proptest::collection::vec((0u64..=8u64, 0u64..=8u64, 0u64..=8, 0u64..=8, any::<bool>()), 1..=5).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, m, ac, am, alive))| {
                    let capacity = ResourceVector::new(c * 500, m * 256);
                    let allocated = if alive {
                        ResourceVector::new(ac.min(c) * 500, am.min(m) * 256)
                    } else {
                        ResourceVector::ZERO
                    };
                    NodeState { node_id: i, capacity, allocated, alive }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn greedy_success_implies_oracle(nodes in arb_nodes(), c in 1u64..6, m in 0u64..6, r in 1u32..8, cursor in 0usize..5) {
            let s = step(c * 500, m * 256, r);
            let oracle = oracle_feasible(&s, &nodes).unwrap();
            for policy in PlacementPolicy::ALL {
                if let Some((plan, _)) = try_place(&s, &nodes, policy, cursor) {
                    prop_assert!(oracle);
                    prop_assert_eq!(plan.assignments.len(), r as usize);
                    let mut copy = nodes.clone();
                    prop_assert!(apply_plan(&plan, &mut copy).is_ok());
                    prop_assert!(plan.assignments.values().all(|&n| nodes[n].alive));
                    release(&plan, &mut copy).unwrap();
                    prop_assert_eq!(&copy, &nodes);
                }
            }
        }
    }
}
