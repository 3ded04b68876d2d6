use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use log::{debug, trace};
use thiserror::Error;

use super::arrivals::{generate_arrivals, ArrivalError, JobArrival};
use super::event::{Event, EventKind};
use super::{Fault, Scenario};
use crate::driver::{cloud_pool_size, DriverActions, DriverError, DriverState, Endpoint};
use crate::metrics::{ArrivalRecord, JobOutcome, RunReport, UtilizationSample};
use crate::model::{validate_job_with_speed, Placement};
use crate::placement::uniform_cluster;
use crate::scheduler::{Directive, ScheduleDecision, SchedulerError, SchedulerState, StepKey};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Arrivals(#[from] ArrivalError),
    #[error("job `{job_id}` is invalid: {violations}")]
    InvalidJob { job_id: String, violations: String },
    #[error("fault refers to unknown job `{0}`")]
    UnknownFaultJob(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("driver for job `{job_id}`: {source}")]
    Driver {
        job_id: String,
        #[source]
        source: DriverError,
    },
    #[error("simulation stalled at t={time} with {outstanding} unfinished jobs")]
    Stalled { time: f64, outstanding: usize },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Check scheduler invariants after every event.
    pub check_invariants: bool,
}

/// A finished run plus the per-fragment completion record.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: RunReport,
    /// Accepted completions per (step, fragment).
    pub completions: BTreeMap<StepKey, BTreeMap<u32, u32>>,
    /// Completions that arrived for cancelled dispatches and were ignored.
    pub stale_completions: u64,
    pub events_processed: u64,
}

pub fn run(scenario: &Scenario) -> Result<RunReport, SimError> {
    Ok(simulate(scenario, SimOptions::default())?.report)
}

pub fn simulate(scenario: &Scenario, options: SimOptions) -> Result<SimRun, SimError> {
    scenario.validate()?;
    let arrivals = generate_arrivals(&scenario.arrivals, &scenario.templates)?;
    let slowest = scenario.slowest_speed_factor();
    for a in &arrivals {
        if let Err(violations) = validate_job_with_speed(&a.job, scenario.execution_timeout, slowest) {
            let violations = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(SimError::InvalidJob {
                job_id: a.job.job_id.clone(),
                violations,
            });
        }
    }
    let mut engine = Engine::new(scenario, arrivals, options)?;
    engine.run()?;
    Ok(engine.into_run())
}

struct Engine<'a> {
    scenario: &'a Scenario,
    options: SimOptions,
    arrivals: Vec<JobArrival>,
    job_index: BTreeMap<String, usize>,
    drivers: Vec<Option<DriverState>>,
    scheduler: SchedulerState,
    queue: BinaryHeap<Event>,
    seq: u64,
    scheduled_ticks: BTreeSet<u64>,
    now: f64,
    utilization: Vec<UtilizationSample>,
    last_round_with_requests: Option<f64>,
    completions: BTreeMap<StepKey, BTreeMap<u32, u32>>,
    stale: u64,
    events: u64,
    unfinished: usize,
    horizon_reached: bool,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, arrivals: Vec<JobArrival>, options: SimOptions) -> Result<Self, SimError> {
        let job_index: BTreeMap<String, usize> = arrivals
            .iter()
            .enumerate()
            .map(|(i, a)| (a.job.job_id.clone(), i))
            .collect();
        let nodes = uniform_cluster(scenario.edge.nodes, scenario.edge.capacity);
        let mut engine = Self {
            scenario,
            options,
            drivers: vec![None; arrivals.len()],
            unfinished: arrivals.len(),
            arrivals,
            job_index,
            scheduler: SchedulerState::new(scenario.scheduler.clone(), nodes),
            queue: BinaryHeap::new(),
            seq: 0,
            scheduled_ticks: BTreeSet::new(),
            now: 0.0,
            utilization: Vec::new(),
            last_round_with_requests: None,
            completions: BTreeMap::new(),
            stale: 0,
            events: 0,
            horizon_reached: false,
        };
        for i in 0..engine.arrivals.len() {
            let t = engine.arrivals[i].job.arrival_time;
            engine.push(t, EventKind::JobArrival { job: i });
        }
        for fault in &scenario.faults {
            let kind = match fault {
                Fault::NodeFailure { node, .. } => EventKind::NodeFailure { node: *node },
                Fault::DriverRestart { job_id, .. } => {
                    if !engine.job_index.contains_key(job_id) {
                        return Err(SimError::UnknownFaultJob(job_id.clone()));
                    }
                    EventKind::DriverRestart { job_id: job_id.clone() }
                }
            };
            engine.push(fault.time(), kind);
        }
        if let Some(h) = scenario.horizon {
            engine.push(h, EventKind::SimulationEnd);
        }
        engine.sample();
        Ok(engine)
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.queue.push(Event { time, seq: self.seq, kind });
        self.seq += 1;
    }

    /// Next round boundary at or after `t`.
    fn schedule_tick(&mut self, t: f64) {
        let r = self.scenario.scheduler.round_length;
        let mut k = (t / r).ceil() as u64;
        if (k as f64) * r < t {
            k += 1;
        }
        if self.scheduled_ticks.insert(k) {
            self.push(k as f64 * r, EventKind::RoundTick);
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(event) = self.queue.pop() {
            self.now = event.time;
            self.events += 1;
            trace!("t={} {:?}", event.time, event.kind);
            match event.kind {
                EventKind::SimulationEnd => {
                    if self.unfinished > 0 {
                        self.horizon_reached = true;
                        debug!("horizon {} reached with {} unfinished jobs", self.now, self.unfinished);
                        self.scheduler.finalize(self.now);
                    }
                    break;
                }
                EventKind::JobArrival { job } => {
                    let arrival = &self.arrivals[job];
                    self.scheduler.submit_request(&arrival.job)?;
                    self.drivers[job] = Some(DriverState::new(arrival.job.clone()));
                    self.schedule_tick(self.now);
                }
                EventKind::RoundTick => {
                    let had_requests = !self.scheduler.pending_requests().is_empty();
                    let decision = self.scheduler.run_round(self.now)?;
                    if had_requests {
                        self.last_round_with_requests = Some(self.now);
                    }
                    self.apply_decision(decision)?;
                }
                EventKind::FragmentComplete { job, step, dispatch } => {
                    let now = self.now;
                    let driver = self.drivers[job].as_mut().expect("dispatching job has a driver");
                    let actions = driver.on_fragment_complete(step, dispatch, now).map_err(|source| SimError::Driver {
                        job_id: driver.job().job_id.clone(),
                        source,
                    })?;
                    if actions.stale {
                        self.stale += 1;
                    } else if let Some(fragment) = actions.journaled {
                        let driver = self.drivers[job].as_ref().expect("present");
                        let key = StepKey::new(driver.job().job_id.clone(), driver.job().dag.steps[step].step_id.clone());
                        *self.completions.entry(key).or_default().entry(fragment).or_default() += 1;
                    }
                    self.handle_actions(job, actions)?;
                }
                EventKind::EvictionExpire { key } => {
                    let directives = self.scheduler.on_eviction_expire(&key, self.now)?;
                    self.apply_decision(ScheduleDecision {
                        time: self.now,
                        directives,
                    })?;
                }
                EventKind::NodeFailure { node } => {
                    let decision = self.scheduler.handle_node_failure(node, self.now)?;
                    self.apply_decision(decision)?;
                }
                EventKind::DriverRestart { job_id } => {
                    let job = self.job_index[&job_id];
                    if let Some(driver) = self.drivers[job].as_mut() {
                        if !driver.is_complete() {
                            let actions = driver.resume_from_journal(self.now);
                            self.handle_actions(job, actions)?;
                        }
                    }
                }
            }
            if self.options.check_invariants {
                self.scheduler.check_invariants()?;
            }
            self.sample();
        }
        if self.unfinished > 0 && !self.horizon_reached {
            return Err(SimError::Stalled {
                time: self.now,
                outstanding: self.unfinished,
            });
        }
        Ok(())
    }

    fn apply_decision(&mut self, decision: ScheduleDecision) -> Result<(), SimError> {
        for directive in decision.directives {
            let effective = directive.effective_time(decision.time);
            if effective > self.now {
                // Re-issued by the scheduler when the eviction expires.
                continue;
            }
            let key = directive.key().clone();
            let job = self.job_index[&key.job_id];
            let driver = self.drivers[job].as_mut().expect("scheduled job has a driver");
            let step = driver.step_index(&key.step_id).expect("scheduled step exists");
            let spec = &driver.job().dag.steps[step];
            let result = match directive {
                Directive::Evict { expiry_time, .. } => {
                    let r = driver.on_eviction_notice(step, expiry_time);
                    self.push(expiry_time, EventKind::EvictionExpire { key: key.clone() });
                    r
                }
                Directive::DeployEdge { plan, .. } => {
                    let endpoint = Endpoint {
                        pool_size: spec.replicas as usize,
                        placement: Placement::Edge {
                            assignments: plan.assignments,
                        },
                        speed_factor: self.scenario.edge.speed_factor,
                    };
                    deploy(driver, step, endpoint, self.now)
                }
                Directive::DeployCloud { endpoint_label, .. } => {
                    let endpoint = Endpoint {
                        pool_size: cloud_pool_size(spec, self.scenario.cloud.concurrency),
                        placement: Placement::Cloud { endpoint_label },
                        speed_factor: self.scenario.cloud.speed_factor,
                    };
                    deploy(driver, step, endpoint, self.now)
                }
            };
            let actions = result.map_err(|source| SimError::Driver {
                job_id: key.job_id.clone(),
                source,
            })?;
            self.handle_actions(job, actions)?;
        }
        Ok(())
    }

    fn handle_actions(&mut self, job: usize, actions: DriverActions) -> Result<(), SimError> {
        for d in &actions.dispatched {
            self.push(
                d.finish_time,
                EventKind::FragmentComplete {
                    job,
                    step: d.step,
                    dispatch: d.dispatch_id,
                },
            );
        }
        let driver = self.drivers[job].as_ref().expect("present");
        let job_id = driver.job().job_id.clone();
        let step_ids: Vec<String> = actions
            .completed_steps
            .iter()
            .map(|&s| driver.job().dag.steps[s].step_id.clone())
            .collect();
        for step_id in step_ids {
            self.scheduler.complete_step(&StepKey::new(job_id.clone(), step_id), self.now)?;
        }
        if actions.job_completed {
            self.unfinished -= 1;
            debug!("job {job_id} completed at {}", self.now);
        }
        Ok(())
    }

    fn sample(&mut self) {
        let nodes = self.scheduler.nodes();
        let alive = || nodes.iter().filter(|n| n.alive);
        let sample = UtilizationSample {
            time: self.now,
            allocated_cpu_millicores: alive().map(|n| n.allocated.cpu_millicores).sum(),
            capacity_cpu_millicores: alive().map(|n| n.capacity.cpu_millicores).sum(),
            allocated_memory_mb: alive().map(|n| n.allocated.memory_mb).sum(),
            capacity_memory_mb: alive().map(|n| n.capacity.memory_mb).sum(),
        };
        match self.utilization.last_mut() {
            Some(last) if last.time == sample.time => *last = sample,
            Some(last) if same_level(last, &sample) => {}
            _ => self.utilization.push(sample),
        }
    }

    fn into_run(self) -> SimRun {
        let horizon = self.scenario.horizon.unwrap_or(self.now);
        let mut outcomes = Vec::new();
        let mut arrivals = Vec::new();
        let mut end_time: f64 = 0.0;
        for (a, driver) in self.arrivals.iter().zip(&self.drivers) {
            let job = &a.job;
            let Some(driver) = driver else { continue };
            end_time = end_time.max(job.arrival_time);
            arrivals.push(ArrivalRecord {
                job_id: job.job_id.clone(),
                template: a.template.clone(),
                time: job.arrival_time,
            });
            outcomes.push(match driver.completed_at() {
                Some(t) => {
                    end_time = end_time.max(t);
                    JobOutcome::completed(job.job_id.clone(), a.template.clone(), job.arrival_time, t, job.deadline)
                }
                None => JobOutcome::unfinished(job.job_id.clone(), a.template.clone(), job.arrival_time, horizon, job.deadline),
            });
        }
        if self.horizon_reached {
            end_time = horizon;
        }
        let mut report = RunReport {
            scenario_id: self.scenario.name.clone(),
            policy: self.scenario.scheduler.mode.to_string(),
            placement: self.scenario.scheduler.placement.short_name().to_string(),
            utilization: self.utilization,
            busy_interval: None,
            mean_utilization: None,
            peak_utilization: 0.0,
            ledger: self.scheduler.ledger().to_vec(),
            total_cost: 0.0,
            outcomes,
            deadline_met_fraction: 0.0,
            arrivals,
            end_time,
            horizon_reached: self.horizon_reached,
        };
        report.finish(self.last_round_with_requests);
        SimRun {
            report,
            completions: self.completions,
            stale_completions: self.stale,
            events_processed: self.events,
        }
    }
}

fn deploy(driver: &mut DriverState, step: usize, endpoint: Endpoint, now: f64) -> Result<DriverActions, DriverError> {
    if driver.endpoint(step).is_some() {
        driver.on_redeploy(step, endpoint, now)
    } else {
        driver.on_deploy(step, endpoint, now)
    }
}

fn same_level(a: &UtilizationSample, b: &UtilizationSample) -> bool {
    a.allocated_cpu_millicores == b.allocated_cpu_millicores
        && a.capacity_cpu_millicores == b.capacity_cpu_millicores
        && a.allocated_memory_mb == b.allocated_memory_mb
        && a.capacity_memory_mb == b.capacity_memory_mb
}
