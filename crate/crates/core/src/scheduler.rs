//! Round-based hybrid scheduler.
//!
//! Requests collected during a round are evaluated together at the round
//! boundary under the Cheapest-First rule: a step goes to the edge if all of
//! its replicas fit; otherwise cheaper resident steps may be evicted to the
//! cloud to make room; otherwise the step itself goes to the cloud. Anything
//! sent to the cloud stays there for the rest of the run.
//!
//! Evictions are not instantaneous. Victims keep their edge resources for the
//! eviction deadline, and the step they make room for holds a reservation
//! that becomes active when that deadline expires. Placement decisions made
//! while evictions are pending use a conservative view of each node: active
//! allocations plus, per eviction, the larger of what the victims hold and
//! what the newcomer will hold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{CostLedgerEntry, Region};
use crate::model::{rcost, BatchJob, CostParams, ResourceVector, StepSpec};
use crate::placement::{apply_plan, release, try_place, NodeState, PlacementError, PlacementPlan, PlacementPolicy};

pub const DEFAULT_ROUND_LENGTH: f64 = 30.0;
pub const DEFAULT_EVICTION_DEADLINE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepKey {
    pub job_id: String,
    pub step_id: String,
}

impl StepKey {
    pub fn new(job_id: impl Into<String>, step_id: impl Into<String>) -> Self {
        Self {
            job_id: job_id.into(),
            step_id: step_id.into(),
        }
    }
}

impl fmt::Display for StepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.job_id, self.step_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingMode {
    #[default]
    CheapestFirst,
    /// Baseline: every step is deployed to the cloud.
    CloudOnly,
}

impl fmt::Display for SchedulingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulingMode::CheapestFirst => "cheapest_first",
            SchedulingMode::CloudOnly => "cloud_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub mode: SchedulingMode,
    pub placement: PlacementPolicy,
    pub round_length: f64,
    pub eviction_deadline: f64,
    pub cost: CostParams,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: SchedulingMode::CheapestFirst,
            placement: PlacementPolicy::FirstFit,
            round_length: DEFAULT_ROUND_LENGTH,
            eviction_deadline: DEFAULT_EVICTION_DEADLINE,
            cost: CostParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("job `{0}` was already submitted")]
    DuplicateJob(String),
    #[error("step {0} is not deployed")]
    UnknownStep(StepKey),
    #[error("no pending eviction for step {0}")]
    UnknownEviction(StepKey),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is already dead")]
    NodeAlreadyDead(usize),
    #[error("scheduler invariant violated: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Directive {
    DeployEdge {
        key: StepKey,
        plan: PlacementPlan,
        effective_time: f64,
    },
    DeployCloud {
        key: StepKey,
        endpoint_label: String,
        effective_time: f64,
    },
    Evict {
        key: StepKey,
        expiry_time: f64,
    },
}

impl Directive {
    pub fn key(&self) -> &StepKey {
        match self {
            Directive::DeployEdge { key, .. } | Directive::DeployCloud { key, .. } | Directive::Evict { key, .. } => key,
        }
    }

    /// Time at which the directive takes effect. Evictions take effect
    /// immediately (the notice); their expiry is a separate event.
    pub fn effective_time(&self, issued_at: f64) -> f64 {
        match self {
            Directive::DeployEdge { effective_time, .. } | Directive::DeployCloud { effective_time, .. } => *effective_time,
            Directive::Evict { .. } => issued_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub time: f64,
    pub directives: Vec<Directive>,
}

impl ScheduleDecision {
    fn new(time: f64) -> Self {
        Self {
            time,
            directives: Vec::new(),
        }
    }
}

pub fn cloud_endpoint(key: &StepKey) -> String {
    format!("cloud://{}/{}", key.job_id, key.step_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub key: StepKey,
    pub step: StepSpec,
    pub rcost: f64,
    pub arrival: f64,
}

/// Placement order: most expensive first, then earlier arrival, then ids.
fn request_order(a: &Request, b: &Request) -> Ordering {
    b.rcost
        .total_cmp(&a.rcost)
        .then(a.arrival.total_cmp(&b.arrival))
        .then_with(|| a.key.cmp(&b.key))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidentStatus {
    Active,
    Evicting { expiry: f64, group: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resident {
    pub request: Request,
    pub plan: PlacementPlan,
    pub status: ResidentStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservation {
    pub request: Request,
    pub plan: PlacementPlan,
    pub activates_at: f64,
    pub group: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct EvictionGroup {
    expiry: f64,
    newcomer: Option<StepKey>,
    /// Victims still holding edge resources.
    holding: BTreeSet<StepKey>,
    /// Victims whose expiry has not been processed yet.
    awaiting_expiry: BTreeSet<StepKey>,
}

#[derive(Debug, Clone, PartialEq)]
struct OpenDeployment {
    region: Region,
    start: f64,
    rcost: f64,
}

#[derive(Debug, Clone)]
pub struct SchedulerState {
    config: SchedulerConfig,
    nodes: Vec<NodeState>,
    resident: BTreeMap<StepKey, Resident>,
    reservations: BTreeMap<StepKey, Reservation>,
    cloud_sticky: BTreeSet<StepKey>,
    cloud_deployed: BTreeMap<StepKey, Request>,
    pending_requests: Vec<Request>,
    groups: BTreeMap<u64, EvictionGroup>,
    next_group: u64,
    rr_cursor: usize,
    known_jobs: BTreeSet<String>,
    completed: BTreeSet<StepKey>,
    open: BTreeMap<StepKey, OpenDeployment>,
    ledger: Vec<CostLedgerEntry>,
}

impl SchedulerState {
    /// Node ids must equal their position in `nodes`.
    pub fn new(config: SchedulerConfig, nodes: Vec<NodeState>) -> Self {
        for (i, n) in nodes.iter().enumerate() {
            assert_eq!(n.node_id, i, "node ids must be dense and ordered");
        }
        Self {
            config,
            nodes,
            resident: BTreeMap::new(),
            reservations: BTreeMap::new(),
            cloud_sticky: BTreeSet::new(),
            cloud_deployed: BTreeMap::new(),
            pending_requests: Vec::new(),
            groups: BTreeMap::new(),
            next_group: 0,
            rr_cursor: 0,
            known_jobs: BTreeSet::new(),
            completed: BTreeSet::new(),
            open: BTreeMap::new(),
            ledger: Vec::new(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn resident(&self) -> &BTreeMap<StepKey, Resident> {
        &self.resident
    }

    pub fn reservations(&self) -> &BTreeMap<StepKey, Reservation> {
        &self.reservations
    }

    pub fn cloud_sticky(&self) -> &BTreeSet<StepKey> {
        &self.cloud_sticky
    }

    pub fn cloud_deployed(&self) -> impl Iterator<Item = &StepKey> {
        self.cloud_deployed.keys()
    }

    pub fn evicting(&self) -> BTreeMap<StepKey, f64> {
        self.resident
            .iter()
            .filter_map(|(k, r)| match r.status {
                ResidentStatus::Evicting { expiry, .. } => Some((k.clone(), expiry)),
                ResidentStatus::Active => None,
            })
            .collect()
    }

    pub fn pending_requests(&self) -> &[Request] {
        &self.pending_requests
    }

    pub fn rr_cursor(&self) -> usize {
        self.rr_cursor
    }

    pub fn ledger(&self) -> &[CostLedgerEntry] {
        &self.ledger
    }

    pub fn rcost_of(&self, key: &StepKey) -> Option<f64> {
        self.resident
            .get(key)
            .map(|r| r.request.rcost)
            .or_else(|| self.reservations.get(key).map(|r| r.request.rcost))
            .or_else(|| self.cloud_deployed.get(key).map(|r| r.rcost))
    }

    /// Queues every step of `job` for the next round boundary.
    pub fn submit_request(&mut self, job: &BatchJob) -> Result<(), SchedulerError> {
        if !self.known_jobs.insert(job.job_id.clone()) {
            return Err(SchedulerError::DuplicateJob(job.job_id.clone()));
        }
        for step in &job.dag.steps {
            self.pending_requests.push(Request {
                key: StepKey::new(job.job_id.clone(), step.step_id.clone()),
                step: step.clone(),
                rcost: rcost(step, &self.config.cost),
                arrival: job.arrival_time,
            });
        }
        Ok(())
    }

    /// Evaluates all requests collected since the previous round.
    pub fn run_round(&mut self, now: f64) -> Result<ScheduleDecision, SchedulerError> {
        let mut pending = std::mem::take(&mut self.pending_requests);
        pending.sort_by(request_order);
        let mut decision = ScheduleDecision::new(now);
        for req in pending {
            self.schedule_request(req, now, &mut decision)?;
        }
        Ok(decision)
    }

    fn schedule_request(&mut self, req: Request, now: f64, decision: &mut ScheduleDecision) -> Result<(), SchedulerError> {
        if self.config.mode == SchedulingMode::CloudOnly || self.cloud_sticky.contains(&req.key) {
            self.deploy_cloud(req, now, decision);
            return Ok(());
        }

        let view = self.planning_view()?;
        if let Some((plan, cursor)) = try_place(&req.step, &view, self.config.placement, self.rr_cursor) {
            self.rr_cursor = cursor;
            self.activate_edge(req, plan, now, decision)?;
            return Ok(());
        }

        if let Some((victims, plan, cursor)) = self.plan_eviction(&req, &view) {
            self.rr_cursor = cursor;
            let expiry = now + self.config.eviction_deadline;
            let group_id = self.next_group;
            self.next_group += 1;
            for victim in &victims {
                let resident = self.resident.get_mut(victim).expect("victim is resident");
                resident.status = ResidentStatus::Evicting { expiry, group: group_id };
                decision.directives.push(Directive::Evict {
                    key: victim.clone(),
                    expiry_time: expiry,
                });
                decision.directives.push(Directive::DeployCloud {
                    key: victim.clone(),
                    endpoint_label: cloud_endpoint(victim),
                    effective_time: expiry,
                });
            }
            decision.directives.push(Directive::DeployEdge {
                key: req.key.clone(),
                plan: plan.clone(),
                effective_time: expiry,
            });
            let victim_set: BTreeSet<StepKey> = victims.into_iter().collect();
            self.groups.insert(
                group_id,
                EvictionGroup {
                    expiry,
                    newcomer: Some(req.key.clone()),
                    holding: victim_set.clone(),
                    awaiting_expiry: victim_set,
                },
            );
            self.reservations.insert(
                req.key.clone(),
                Reservation {
                    request: req,
                    plan,
                    activates_at: expiry,
                    group: group_id,
                },
            );
            return Ok(());
        }

        self.deploy_cloud(req, now, decision);
        Ok(())
    }

    /// Cheapest active residents (strictly cheaper than `req`), added one at
    /// a time until `req` fits in the space they would free.
    fn plan_eviction(&self, req: &Request, view: &[NodeState]) -> Option<(Vec<StepKey>, PlacementPlan, usize)> {
        let mut candidates: Vec<(&StepKey, &Resident)> = self
            .resident
            .iter()
            .filter(|(_, r)| r.status == ResidentStatus::Active && r.request.rcost < req.rcost)
            .collect();
        candidates.sort_by(|a, b| a.1.request.rcost.total_cmp(&b.1.request.rcost).then_with(|| a.0.cmp(b.0)));

        let mut trial = view.to_vec();
        let mut victims = Vec::new();
        for (key, resident) in candidates {
            for (node, demand) in resident.plan.per_node_demand() {
                trial[node].allocated = trial[node]
                    .allocated
                    .checked_sub(&demand)
                    .expect("planning view covers active residents");
            }
            victims.push(key.clone());
            if let Some((plan, cursor)) = try_place(&req.step, &trial, self.config.placement, self.rr_cursor) {
                return Some((victims, plan, cursor));
            }
        }
        None
    }

    fn activate_edge(&mut self, req: Request, plan: PlacementPlan, now: f64, decision: &mut ScheduleDecision) -> Result<(), SchedulerError> {
        apply_plan(&plan, &mut self.nodes)?;
        self.open_deployment(&req.key, Region::Edge, now, req.rcost);
        decision.directives.push(Directive::DeployEdge {
            key: req.key.clone(),
            plan: plan.clone(),
            effective_time: now,
        });
        self.resident.insert(
            req.key.clone(),
            Resident {
                request: req,
                plan,
                status: ResidentStatus::Active,
            },
        );
        Ok(())
    }

    fn deploy_cloud(&mut self, req: Request, now: f64, decision: &mut ScheduleDecision) {
        self.cloud_sticky.insert(req.key.clone());
        self.open_deployment(&req.key, Region::Cloud, now, req.rcost);
        decision.directives.push(Directive::DeployCloud {
            key: req.key.clone(),
            endpoint_label: cloud_endpoint(&req.key),
            effective_time: now,
        });
        self.cloud_deployed.insert(req.key.clone(), req);
    }

    fn open_deployment(&mut self, key: &StepKey, region: Region, start: f64, rcost: f64) {
        let previous = self.open.insert(key.clone(), OpenDeployment { region, start, rcost });
        debug_assert!(previous.is_none(), "deployment of {key} opened twice");
    }

    fn close_deployment(&mut self, key: &StepKey, end: f64) {
        if let Some(open) = self.open.remove(key) {
            let cost = match open.region {
                Region::Edge => 0.0,
                Region::Cloud => open.rcost * (end - open.start),
            };
            self.ledger.push(CostLedgerEntry {
                job_id: key.job_id.clone(),
                step_id: key.step_id.clone(),
                rcost_per_second: open.rcost,
                deploy_start: open.start,
                deploy_end: end,
                region: open.region,
                cost,
            });
        }
    }

    /// Node snapshot whose allocations are the conservative occupancy used
    /// for new placement decisions.
    pub fn planning_view(&self) -> Result<Vec<NodeState>, SchedulerError> {
        let n = self.nodes.len();
        let mut occupancy = vec![ResourceVector::ZERO; n];
        for r in self.resident.values() {
            if r.status == ResidentStatus::Active {
                for (node, d) in r.plan.per_node_demand() {
                    occupancy[node] = occupancy[node] + d;
                }
            }
        }
        for group in self.groups.values() {
            let mut held = vec![ResourceVector::ZERO; n];
            for victim in &group.holding {
                for (node, d) in self.resident[victim].plan.per_node_demand() {
                    held[node] = held[node] + d;
                }
            }
            let mut reserved = vec![ResourceVector::ZERO; n];
            if let Some(newcomer) = &group.newcomer {
                for (node, d) in self.reservations[newcomer].plan.per_node_demand() {
                    reserved[node] = reserved[node] + d;
                }
            }
            for i in 0..n {
                occupancy[i] = occupancy[i] + held[i].componentwise_max(&reserved[i]);
            }
        }
        let mut view = self.nodes.clone();
        for (node, occ) in view.iter_mut().zip(occupancy) {
            if !occ.fits_within(&node.capacity) || (!node.alive && !occ.is_zero()) {
                return Err(SchedulerError::Inconsistent(format!(
                    "planning occupancy {occ} on node {} exceeds capacity {}",
                    node.node_id, node.capacity
                )));
            }
            node.allocated = occ;
        }
        Ok(view)
    }

    /// Records completion of a deployed step and frees what it held.
    pub fn complete_step(&mut self, key: &StepKey, now: f64) -> Result<(), SchedulerError> {
        if let Some(resident) = self.resident.remove(key) {
            release(&resident.plan, &mut self.nodes)?;
            if let ResidentStatus::Evicting { group, .. } = resident.status {
                if let Some(g) = self.groups.get_mut(&group) {
                    g.holding.remove(key);
                }
            }
        } else if self.cloud_deployed.remove(key).is_none() {
            return Err(SchedulerError::UnknownStep(key.clone()));
        }
        self.close_deployment(key, now);
        self.completed.insert(key.clone());
        Ok(())
    }

    /// Processes the end of the graceful-shutdown period for `key`. Returns
    /// the deployments that take effect now: the victim's cloud deployment
    /// (unless it already finished or moved), and the newcomer's edge
    /// deployment once every victim of its eviction has expired.
    pub fn on_eviction_expire(&mut self, key: &StepKey, now: f64) -> Result<Vec<Directive>, SchedulerError> {
        let group_id = self
            .groups
            .iter()
            .find(|(_, g)| g.awaiting_expiry.contains(key))
            .map(|(&id, _)| id)
            .ok_or_else(|| SchedulerError::UnknownEviction(key.clone()))?;
        let mut out = Vec::new();
        let group = self.groups.get_mut(&group_id).expect("found above");
        group.awaiting_expiry.remove(key);
        let still_holding = group.holding.remove(key);

        if still_holding {
            let resident = self
                .resident
                .remove(key)
                .ok_or_else(|| SchedulerError::Inconsistent(format!("evicting step {key} not resident")))?;
            release(&resident.plan, &mut self.nodes)?;
            self.close_deployment(key, now);
            self.cloud_sticky.insert(key.clone());
            self.open_deployment(key, Region::Cloud, now, resident.request.rcost);
            out.push(Directive::DeployCloud {
                key: key.clone(),
                endpoint_label: cloud_endpoint(key),
                effective_time: now,
            });
            self.cloud_deployed.insert(key.clone(), resident.request);
        }

        let group = &self.groups[&group_id];
        if group.awaiting_expiry.is_empty() {
            if !group.holding.is_empty() {
                return Err(SchedulerError::Inconsistent(format!("eviction group {group_id} expired with victims still holding")));
            }
            let group = self.groups.remove(&group_id).expect("present");
            if let Some(newcomer) = group.newcomer {
                let reservation = self.reservations.remove(&newcomer).expect("group newcomer is reserved");
                let mut decision = ScheduleDecision::new(now);
                self.activate_edge(reservation.request, reservation.plan, now, &mut decision)?;
                out.extend(decision.directives);
            }
        }
        Ok(out)
    }

    /// Marks `node_id` dead and re-places every step that had a replica on it:
    /// surviving edge nodes first, otherwise the cloud.
    pub fn handle_node_failure(&mut self, node_id: usize, now: f64) -> Result<ScheduleDecision, SchedulerError> {
        let node = self.nodes.get(node_id).ok_or(SchedulerError::UnknownNode(node_id))?;
        if !node.alive {
            return Err(SchedulerError::NodeAlreadyDead(node_id));
        }
        let mut decision = ScheduleDecision::new(now);
        let mut to_replace = Vec::new();

        let hit: Vec<StepKey> = self
            .resident
            .iter()
            .filter(|(_, r)| r.plan.touches(node_id))
            .map(|(k, _)| k.clone())
            .collect();
        for key in hit {
            let resident = self.resident.remove(&key).expect("listed above");
            release(&resident.plan, &mut self.nodes)?;
            self.close_deployment(&key, now);
            match resident.status {
                ResidentStatus::Active => to_replace.push(resident.request),
                ResidentStatus::Evicting { group, .. } => {
                    // Already on its way to the cloud; move it now.
                    if let Some(g) = self.groups.get_mut(&group) {
                        g.holding.remove(&key);
                    }
                    self.deploy_cloud(resident.request, now, &mut decision);
                }
            }
        }

        let hit: Vec<StepKey> = self
            .reservations
            .iter()
            .filter(|(_, r)| r.plan.touches(node_id))
            .map(|(k, _)| k.clone())
            .collect();
        for key in hit {
            let reservation = self.reservations.remove(&key).expect("listed above");
            if let Some(g) = self.groups.get_mut(&reservation.group) {
                g.newcomer = None;
            }
            to_replace.push(reservation.request);
        }

        let node = &mut self.nodes[node_id];
        if !node.allocated.is_zero() {
            return Err(SchedulerError::Inconsistent(format!("dead node {node_id} still holds {}", node.allocated)));
        }
        node.alive = false;

        to_replace.sort_by(request_order);
        for req in to_replace {
            let view = self.planning_view()?;
            match try_place(&req.step, &view, self.config.placement, self.rr_cursor) {
                Some((plan, cursor)) => {
                    self.rr_cursor = cursor;
                    self.activate_edge(req, plan, now, &mut decision)?;
                }
                None => self.deploy_cloud(req, now, &mut decision),
            }
        }
        Ok(decision)
    }

    /// Closes every open deployment at `now` (used when a run stops at its
    /// horizon with work outstanding).
    pub fn finalize(&mut self, now: f64) {
        let keys: Vec<StepKey> = self.open.keys().cloned().collect();
        for key in keys {
            self.close_deployment(&key, now);
        }
    }

    /// Verifies the structural invariants; used by tests and debug builds.
    pub fn check_invariants(&self) -> Result<(), SchedulerError> {
        let fail = |msg: String| Err(SchedulerError::Inconsistent(msg));
        for key in self.resident.keys() {
            if self.cloud_sticky.contains(key) {
                return fail(format!("{key} is both resident and cloud-sticky"));
            }
        }
        let mut expected = vec![ResourceVector::ZERO; self.nodes.len()];
        for r in self.resident.values() {
            for (node, d) in r.plan.per_node_demand() {
                expected[node] = expected[node] + d;
            }
        }
        for (node, exp) in self.nodes.iter().zip(&expected) {
            if node.allocated != *exp {
                return fail(format!("node {} allocation {} != resident sum {}", node.node_id, node.allocated, exp));
            }
            if !node.allocated.fits_within(&node.capacity) {
                return fail(format!("node {} over capacity", node.node_id));
            }
            if !node.alive && !node.allocated.is_zero() {
                return fail(format!("dead node {} holds allocations", node.node_id));
            }
        }
        for (id, g) in &self.groups {
            for v in &g.holding {
                match self.resident.get(v).map(|r| r.status) {
                    Some(ResidentStatus::Evicting { group, .. }) if group == *id => {}
                    _ => return fail(format!("victim {v} of group {id} is not evicting")),
                }
            }
        }
        self.planning_view().map(|_| ())
    }
}
