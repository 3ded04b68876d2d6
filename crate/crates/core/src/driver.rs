//! Per-job batch driver: pushes fragments through the pipeline, one worker per
//! in-flight request, and journals every completed (step, fragment) pair so
//! that a restarted driver re-sends only unprocessed fragments.
//!
//! A fragment becomes ready at a feed-forward step as soon as every
//! predecessor has journaled it. A step that is not feed-forward waits until
//! its predecessors have journaled every fragment, then releases them all.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BatchJob, Placement, StepSpec, StepState, Topology};

/// Trailing window of the completion-rate estimator, in seconds.
pub const DEFAULT_ESTIMATOR_WINDOW: f64 = 30.0;

pub type DispatchId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriverError {
    #[error("unknown step index {0}")]
    UnknownStep(usize),
    #[error("step `{0}` is already completed")]
    StepCompleted(String),
    #[error("step `{0}` is already deployed")]
    AlreadyDeployed(String),
    #[error("step `{0}` is not deployed")]
    NotDeployed(String),
    #[error("step `{0}` is not deployed at the edge")]
    NotEdgeDeployed(String),
    #[error("worker pool for step `{0}` must be >= 1")]
    ZeroPool(String),
    #[error("dispatch {dispatch} of step `{step}` is not in flight")]
    NotInFlight { step: String, dispatch: DispatchId },
    #[error("fragment {fragment} of step `{step}` was already journaled")]
    DuplicateCompletion { step: String, fragment: u32 },
    #[error("fragment {fragment} out of range for step `{step}`")]
    FragmentOutOfRange { step: String, fragment: u32 },
}

/// Where and how a step's fragments are processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub placement: Placement,
    /// Number of concurrent requests the driver keeps in flight.
    pub pool_size: usize,
    /// Service times are divided by this factor.
    pub speed_factor: f64,
}

/// Concurrency the driver uses against a cloud deployment.
pub fn cloud_pool_size(step: &StepSpec, cloud_concurrency: Option<usize>) -> usize {
    cloud_concurrency.unwrap_or(step.replicas as usize)
}

/// Persistent record of completed (step, fragment) pairs. Entries are never
/// removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Journal {
    fragment_count: u32,
    completed: Vec<BTreeSet<u32>>,
}

impl Journal {
    pub fn new(step_count: usize, fragment_count: u32) -> Self {
        Self {
            fragment_count,
            completed: vec![BTreeSet::new(); step_count],
        }
    }

    pub fn contains(&self, step: usize, fragment: u32) -> bool {
        self.completed[step].contains(&fragment)
    }

    pub fn count(&self, step: usize) -> usize {
        self.completed[step].len()
    }

    pub fn is_step_complete(&self, step: usize) -> bool {
        self.completed[step].len() == self.fragment_count as usize
    }

    pub fn step_entries(&self, step: usize) -> &BTreeSet<u32> {
        &self.completed[step]
    }

    /// Returns `false` if the entry was already present.
    pub fn record(&mut self, step: usize, fragment: u32) -> bool {
        self.completed[step].insert(fragment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub window: f64,
    pub completions_in_window: usize,
    pub remaining_fragments: usize,
    /// Seconds to completion, or `None` while no rate has been observed.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispatch {
    pub step: usize,
    pub fragment: u32,
    pub dispatch_id: DispatchId,
    pub finish_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriverActions {
    pub dispatched: Vec<Dispatch>,
    pub cancelled: Vec<DispatchId>,
    pub completed_steps: Vec<usize>,
    pub job_completed: bool,
    /// Fragment journaled by this completion.
    pub journaled: Option<u32>,
    /// The completion belonged to a cancelled dispatch and was ignored.
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct InFlight {
    fragment: u32,
    worker: usize,
    finish_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct StepRuntime {
    state: StepState,
    endpoint: Option<Endpoint>,
    draining_until: Option<f64>,
    ready: BTreeSet<u32>,
    in_flight: BTreeMap<DispatchId, InFlight>,
    dispatch_count: u64,
}

#[derive(Debug, Clone)]
pub struct DriverState {
    job: BatchJob,
    topology: Topology,
    terminals: Vec<usize>,
    steps: Vec<StepRuntime>,
    journal: Journal,
    next_dispatch: DispatchId,
    cancelled: BTreeSet<DispatchId>,
    terminal_completions: Vec<f64>,
    completed_at: Option<f64>,
    estimator_window: f64,
}

impl DriverState {
    pub fn new(job: BatchJob) -> Self {
        let journal = Journal::new(job.dag.steps.len(), job.fragment_count);
        Self::restore(job, journal)
    }

    /// Builds a driver from a previously persisted journal: steps whose
    /// fragments are all journaled start out completed, and every other
    /// step's ready queue holds exactly its unjournaled, available fragments.
    pub fn restore(job: BatchJob, journal: Journal) -> Self {
        let topology = job.dag.topology();
        let terminals = topology.terminals();
        let steps = (0..job.dag.steps.len())
            .map(|i| StepRuntime {
                state: if journal.is_step_complete(i) {
                    StepState::Completed
                } else {
                    StepState::Pending
                },
                endpoint: None,
                draining_until: None,
                ready: BTreeSet::new(),
                in_flight: BTreeMap::new(),
                dispatch_count: 0,
            })
            .collect();
        let mut driver = Self {
            job,
            topology,
            terminals,
            steps,
            journal,
            next_dispatch: 0,
            cancelled: BTreeSet::new(),
            terminal_completions: Vec::new(),
            completed_at: None,
            estimator_window: DEFAULT_ESTIMATOR_WINDOW,
        };
        driver.rebuild_ready();
        driver
    }

    pub fn with_estimator_window(mut self, window: f64) -> Self {
        self.estimator_window = window;
        self
    }

    pub fn job(&self) -> &BatchJob {
        &self.job
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn step_index(&self, step_id: &str) -> Option<usize> {
        self.job.dag.index_of(step_id)
    }

    pub fn step_state(&self, step: usize) -> StepState {
        self.steps[step].state
    }

    pub fn endpoint(&self, step: usize) -> Option<&Endpoint> {
        self.steps[step].endpoint.as_ref()
    }

    pub fn is_draining(&self, step: usize) -> bool {
        self.steps[step].draining_until.is_some()
    }

    pub fn in_flight_count(&self, step: usize) -> usize {
        self.steps[step].in_flight.len()
    }

    pub fn ready_fragments(&self, step: usize) -> Vec<u32> {
        self.steps[step].ready.iter().copied().collect()
    }

    pub fn in_flight_fragments(&self, step: usize) -> Vec<u32> {
        self.steps[step].in_flight.values().map(|f| f.fragment).collect()
    }

    /// Total dispatches ever issued for a step, including cancelled ones.
    pub fn dispatch_count(&self, step: usize) -> u64 {
        self.steps[step].dispatch_count
    }

    pub fn completed_at(&self) -> Option<f64> {
        self.completed_at
    }

    pub fn is_complete(&self) -> bool {
        self.steps.iter().all(|s| s.state == StepState::Completed)
    }

    fn check_step(&self, step: usize) -> Result<(), DriverError> {
        if step < self.steps.len() {
            Ok(())
        } else {
            Err(DriverError::UnknownStep(step))
        }
    }

    fn step_id(&self, step: usize) -> String {
        self.job.dag.steps[step].step_id.clone()
    }

    fn all_preds_complete(&self, step: usize) -> bool {
        self.topology.preds[step].iter().all(|&p| self.journal.is_step_complete(p))
    }

    /// Whether `fragment` may be processed at `step` given the journal.
    fn is_available(&self, step: usize, fragment: u32) -> bool {
        let preds = &self.topology.preds[step];
        if preds.is_empty() {
            return true;
        }
        if self.job.dag.steps[step].feed_forward {
            preds.iter().all(|&p| self.journal.contains(p, fragment))
        } else {
            self.all_preds_complete(step)
        }
    }

    fn is_barrier_open(&self, step: usize) -> bool {
        self.job.dag.steps[step].feed_forward || self.all_preds_complete(step)
    }

    fn rebuild_ready(&mut self) {
        for step in 0..self.steps.len() {
            if self.steps[step].state == StepState::Completed {
                self.steps[step].ready.clear();
                continue;
            }
            let in_flight: BTreeSet<u32> = self.steps[step].in_flight.values().map(|f| f.fragment).collect();
            let ready: BTreeSet<u32> = (0..self.job.fragment_count)
                .filter(|&f| !self.journal.contains(step, f) && !in_flight.contains(&f) && self.is_available(step, f))
                .collect();
            self.steps[step].ready = ready;
        }
    }

    fn transition(&mut self, step: usize, next: StepState) {
        let current = self.steps[step].state;
        debug_assert!(current.can_transition_to(next), "illegal {current:?} -> {next:?}");
        self.steps[step].state = next;
    }

    fn dispatch(&mut self, step: usize, now: f64, actions: &mut DriverActions) {
        let rt = &self.steps[step];
        if rt.state != StepState::Running || rt.draining_until.is_some() {
            return;
        }
        let Some(endpoint) = rt.endpoint.clone() else {
            return;
        };
        let service = self.job.dag.steps[step].service_time_per_fragment / endpoint.speed_factor;
        let rt = &mut self.steps[step];
        while rt.in_flight.len() < endpoint.pool_size {
            let Some(fragment) = rt.ready.pop_first() else {
                break;
            };
            let busy: BTreeSet<usize> = rt.in_flight.values().map(|f| f.worker).collect();
            let worker = (0..endpoint.pool_size).find(|w| !busy.contains(w)).expect("pool has a free worker");
            let dispatch_id = self.next_dispatch;
            self.next_dispatch += 1;
            let finish_time = now + service;
            rt.in_flight.insert(
                dispatch_id,
                InFlight {
                    fragment,
                    worker,
                    finish_time,
                },
            );
            rt.dispatch_count += 1;
            actions.dispatched.push(Dispatch {
                step,
                fragment,
                dispatch_id,
                finish_time,
            });
        }
    }

    fn cancel_in_flight(&mut self, step: usize, filter: impl Fn(&InFlight) -> bool, actions: &mut DriverActions) {
        let doomed: Vec<DispatchId> = self.steps[step]
            .in_flight
            .iter()
            .filter(|(_, f)| filter(f))
            .map(|(&id, _)| id)
            .collect();
        for id in doomed {
            let f = self.steps[step].in_flight.remove(&id).expect("listed above");
            self.steps[step].ready.insert(f.fragment);
            self.cancelled.insert(id);
            actions.cancelled.push(id);
        }
    }

    /// First deployment of a step.
    pub fn on_deploy(&mut self, step: usize, endpoint: Endpoint, now: f64) -> Result<DriverActions, DriverError> {
        self.check_step(step)?;
        match self.steps[step].state {
            StepState::Completed => return Err(DriverError::StepCompleted(self.step_id(step))),
            _ if self.steps[step].endpoint.is_some() => return Err(DriverError::AlreadyDeployed(self.step_id(step))),
            _ => {}
        }
        if endpoint.pool_size == 0 {
            return Err(DriverError::ZeroPool(self.step_id(step)));
        }
        self.steps[step].endpoint = Some(endpoint);
        let next = if self.is_barrier_open(step) {
            StepState::Running
        } else {
            StepState::Waiting
        };
        self.transition(step, next);
        let mut actions = DriverActions::default();
        self.dispatch(step, now, &mut actions);
        Ok(actions)
    }

    /// Moves a deployed step to a new endpoint (eviction expiry or node
    /// failure). Requests still in flight on the old endpoint are cancelled
    /// and their fragments requeued.
    pub fn on_redeploy(&mut self, step: usize, endpoint: Endpoint, now: f64) -> Result<DriverActions, DriverError> {
        self.check_step(step)?;
        if self.steps[step].state == StepState::Completed {
            return Err(DriverError::StepCompleted(self.step_id(step)));
        }
        if self.steps[step].endpoint.is_none() {
            return Err(DriverError::NotDeployed(self.step_id(step)));
        }
        if endpoint.pool_size == 0 {
            return Err(DriverError::ZeroPool(self.step_id(step)));
        }
        let mut actions = DriverActions::default();
        self.cancel_in_flight(step, |_| true, &mut actions);
        let rt = &mut self.steps[step];
        rt.endpoint = Some(endpoint);
        rt.draining_until = None;
        self.dispatch(step, now, &mut actions);
        Ok(actions)
    }

    /// Graceful-shutdown notice for an edge step. Requests that finish by
    /// `expiry` run to completion; later ones are cancelled and requeued. No
    /// new requests are sent until the step is redeployed.
    pub fn on_eviction_notice(&mut self, step: usize, expiry: f64) -> Result<DriverActions, DriverError> {
        self.check_step(step)?;
        let rt = &self.steps[step];
        if rt.state == StepState::Completed {
            return Err(DriverError::StepCompleted(self.step_id(step)));
        }
        if !rt.endpoint.as_ref().is_some_and(|e| e.placement.is_edge()) {
            return Err(DriverError::NotEdgeDeployed(self.step_id(step)));
        }
        let mut actions = DriverActions::default();
        self.cancel_in_flight(step, |f| f.finish_time > expiry, &mut actions);
        self.steps[step].draining_until = Some(expiry);
        Ok(actions)
    }

    pub fn on_fragment_complete(&mut self, step: usize, dispatch_id: DispatchId, now: f64) -> Result<DriverActions, DriverError> {
        self.check_step(step)?;
        if self.cancelled.remove(&dispatch_id) {
            return Ok(DriverActions {
                stale: true,
                ..Default::default()
            });
        }
        let done = self.steps[step]
            .in_flight
            .remove(&dispatch_id)
            .ok_or_else(|| DriverError::NotInFlight {
                step: self.step_id(step),
                dispatch: dispatch_id,
            })?;
        let fragment = done.fragment;
        if fragment >= self.job.fragment_count {
            return Err(DriverError::FragmentOutOfRange {
                step: self.step_id(step),
                fragment,
            });
        }
        if !self.journal.record(step, fragment) {
            return Err(DriverError::DuplicateCompletion {
                step: self.step_id(step),
                fragment,
            });
        }
        if self.terminals.contains(&step) {
            self.terminal_completions.push(now);
        }

        let mut actions = DriverActions {
            journaled: Some(fragment),
            ..Default::default()
        };
        for succ in self.topology.succs[step].clone() {
            if self.steps[succ].state == StepState::Completed {
                continue;
            }
            if self.job.dag.steps[succ].feed_forward {
                if self.is_available(succ, fragment) && !self.journal.contains(succ, fragment) {
                    self.steps[succ].ready.insert(fragment);
                }
            } else if self.journal.is_step_complete(step) && self.all_preds_complete(succ) {
                // Barrier opens: every fragment becomes ready at once.
                let all: BTreeSet<u32> = (0..self.job.fragment_count)
                    .filter(|&f| !self.journal.contains(succ, f))
                    .collect();
                self.steps[succ].ready = all;
                if self.steps[succ].state == StepState::Waiting {
                    self.transition(succ, StepState::Running);
                }
            }
        }

        if self.journal.is_step_complete(step) {
            self.transition(step, StepState::Completed);
            self.steps[step].ready.clear();
            actions.completed_steps.push(step);
        } else {
            self.dispatch(step, now, &mut actions);
        }
        for succ in self.topology.succs[step].clone() {
            self.dispatch(succ, now, &mut actions);
        }

        if self.completed_at.is_none() && self.is_complete() {
            self.completed_at = Some(now);
            actions.job_completed = true;
        }
        Ok(actions)
    }

    /// Simulated driver restart: everything in flight is forgotten, ready
    /// queues are rebuilt from the journal, and only unjournaled fragments are
    /// sent again.
    pub fn resume_from_journal(&mut self, now: f64) -> DriverActions {
        let mut actions = DriverActions::default();
        if self.is_complete() {
            return actions;
        }
        for step in 0..self.steps.len() {
            self.cancel_in_flight(step, |_| true, &mut actions);
        }
        self.rebuild_ready();
        for step in 0..self.steps.len() {
            if self.steps[step].state == StepState::Waiting && self.is_barrier_open(step) {
                self.transition(step, StepState::Running);
            }
            self.dispatch(step, now, &mut actions);
        }
        actions
    }

    /// Remaining-time estimate from the completion rate at the terminal
    /// step(s) over the trailing window.
    pub fn estimate_remaining(&self, now: f64) -> RateEstimate {
        let total = self.job.fragment_count as usize * self.terminals.len();
        let done: usize = self.terminals.iter().map(|&t| self.journal.count(t)).sum();
        let remaining = total - done;
        let window = self.estimator_window;
        let completions = self
            .terminal_completions
            .iter()
            .filter(|&&t| t > now - window && t <= now)
            .count();
        let estimate = if remaining == 0 {
            Some(0.0)
        } else if completions > 0 {
            Some(remaining as f64 / (completions as f64 / window))
        } else {
            None
        };
        RateEstimate {
            window,
            completions_in_window: completions,
            remaining_fragments: remaining,
            estimate,
        }
    }

    #[cfg(test)]
    fn record_terminal_completion(&mut self, t: f64) {
        self.terminal_completions.push(t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    seq: u64,
    step: usize,
    dispatch: DispatchId,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Makespan of `job` run alone with every step deployed at time 0, at the
/// given speed factor, with `pool(step)` concurrent requests per step.
pub fn isolated_makespan(job: &BatchJob, speed_factor: f64, pool: impl Fn(&StepSpec) -> usize) -> Result<f64, DriverError> {
    let mut driver = DriverState::new(job.clone());
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BinaryHeap<Reverse<Pending>>, actions: DriverActions| {
        for d in actions.dispatched {
            queue.push(Reverse(Pending {
                time: d.finish_time,
                seq,
                step: d.step,
                dispatch: d.dispatch_id,
            }));
            seq += 1;
        }
    };
    for (i, step) in job.dag.steps.iter().enumerate() {
        let endpoint = Endpoint {
            placement: Placement::Cloud {
                endpoint_label: step.step_id.clone(),
            },
            pool_size: pool(step),
            speed_factor,
        };
        let actions = driver.on_deploy(i, endpoint, 0.0)?;
        push(&mut queue, actions);
    }
    while let Some(Reverse(p)) = queue.pop() {
        let actions = driver.on_fragment_complete(p.step, p.dispatch, p.time)?;
        if actions.job_completed {
            return Ok(p.time);
        }
        push(&mut queue, actions);
    }
    Ok(driver.completed_at().unwrap_or(0.0))
}
