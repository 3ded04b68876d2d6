//! Workload and resource types shared by every part of the simulator, plus the
//! per-second allocation cost model used to price cloud deployments.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Execution timeout applied when a scenario does not configure one.
pub const DEFAULT_EXECUTION_TIMEOUT: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("resource subtraction underflow: {lhs} - {rhs}")]
    ResourceUnderflow {
        lhs: ResourceVector,
        rhs: ResourceVector,
    },
    #[error("deployed time must be >= 0, got {0}")]
    NegativeDuration(f64),
}

/// A CPU/memory quantity. CPU is kept in millicores so capacity bookkeeping
/// stays in exact integer arithmetic.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ResourceVector {
    pub cpu_millicores: u64,
    pub memory_mb: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        cpu_millicores: 0,
        memory_mb: 0,
    };

    pub const fn new(cpu_millicores: u64, memory_mb: u64) -> Self {
        Self {
            cpu_millicores,
            memory_mb,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.cpu_millicores == 0 && self.memory_mb == 0
    }

    /// Componentwise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.cpu_millicores <= other.cpu_millicores && self.memory_mb <= other.memory_mb
    }

    /// Componentwise subtraction; fails instead of clamping when either
    /// component would go negative.
    pub fn checked_sub(&self, rhs: &ResourceVector) -> Result<ResourceVector, ModelError> {
        match (
            self.cpu_millicores.checked_sub(rhs.cpu_millicores),
            self.memory_mb.checked_sub(rhs.memory_mb),
        ) {
            (Some(cpu_millicores), Some(memory_mb)) => Ok(ResourceVector {
                cpu_millicores,
                memory_mb,
            }),
            _ => Err(ModelError::ResourceUnderflow {
                lhs: *self,
                rhs: *rhs,
            }),
        }
    }

    pub fn scaled(&self, factor: u64) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores * factor,
            memory_mb: self.memory_mb * factor,
        }
    }

    /// Componentwise maximum.
    pub fn componentwise_max(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores.max(other.cpu_millicores),
            memory_mb: self.memory_mb.max(other.memory_mb),
        }
    }

    pub fn vcpus(&self) -> f64 {
        self.cpu_millicores as f64 / 1000.0
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores + rhs.cpu_millicores,
            memory_mb: self.memory_mb + rhs.memory_mb,
        }
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, |acc, r| acc + r)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}m CPU, {} MB)", self.cpu_millicores, self.memory_mb)
    }
}

/// Unit prices for cloud allocations: cost units per vCPU-second and per
/// MB-second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub c_cpu: f64,
    pub c_mem: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            c_cpu: 1000.0,
            c_mem: 0.1,
        }
    }
}

/// One processing step (a serverless function) of a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub step_id: String,
    pub demand_per_replica: ResourceVector,
    pub replicas: u32,
    /// Seconds to process one fragment at reference (speed factor 1.0) speed.
    pub service_time_per_fragment: f64,
    pub feed_forward: bool,
    /// Carried for completeness; the simulation is driven by service time.
    pub fragment_size_bytes: u64,
}

impl StepSpec {
    pub fn new(step_id: impl Into<String>, demand: ResourceVector, replicas: u32, service_time: f64) -> Self {
        Self {
            step_id: step_id.into(),
            demand_per_replica: demand,
            replicas,
            service_time_per_fragment: service_time,
            feed_forward: true,
            fragment_size_bytes: 1 << 20,
        }
    }

    pub fn with_feed_forward(mut self, feed_forward: bool) -> Self {
        self.feed_forward = feed_forward;
        self
    }

    /// Resources held by the full replica set.
    pub fn total_demand(&self) -> ResourceVector {
        self.demand_per_replica.scaled(self.replicas as u64)
    }
}

/// Allocation cost per second of a step's full replica set.
pub fn rcost(step: &StepSpec, params: &CostParams) -> f64 {
    let per_replica = step.demand_per_replica.memory_mb as f64 * params.c_mem
        + step.demand_per_replica.vcpus() * params.c_cpu;
    per_replica * step.replicas as f64
}

/// Cost of keeping a step's replicas allocated for `deployed_time` seconds.
pub fn total_cost(step: &StepSpec, params: &CostParams, deployed_time: f64) -> Result<f64, ModelError> {
    if !(deployed_time >= 0.0) {
        return Err(ModelError::NegativeDuration(deployed_time));
    }
    Ok(rcost(step, params) * deployed_time)
}

/// A pipeline of steps connected by invocation edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDag {
    pub steps: Vec<StepSpec>,
    pub edges: Vec<(String, String)>,
}

impl PipelineDag {
    /// A linear chain `steps[0] -> steps[1] -> ...`.
    pub fn chain(steps: Vec<StepSpec>) -> Self {
        let edges = steps
            .windows(2)
            .map(|w| (w[0].step_id.clone(), w[1].step_id.clone()))
            .collect();
        Self { steps, edges }
    }

    pub fn index_of(&self, step_id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.step_id == step_id)
    }

    /// Resolves edges into index form. Edges naming unknown steps are
    /// skipped; `validate_job` reports them.
    pub fn topology(&self) -> Topology {
        let n = self.steps.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            if let (Some(a), Some(b)) = (self.index_of(from), self.index_of(to)) {
                if !succs[a].contains(&b) {
                    succs[a].push(b);
                    preds[b].push(a);
                }
            }
        }
        for list in preds.iter_mut().chain(succs.iter_mut()) {
            list.sort_unstable();
        }
        Topology { preds, succs }
    }

    /// Kahn topological order, or `None` when the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let topo = self.topology();
        let n = self.steps.len();
        let mut indegree: Vec<usize> = topo.preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &s in &topo.succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        (order.len() == n).then_some(order)
    }
}

/// Index-based adjacency of a pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
}

impl Topology {
    pub fn sources(&self) -> Vec<usize> {
        (0..self.preds.len()).filter(|&i| self.preds[i].is_empty()).collect()
    }

    pub fn terminals(&self) -> Vec<usize> {
        (0..self.succs.len()).filter(|&i| self.succs[i].is_empty()).collect()
    }
}

/// A user-submitted batch job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchJob {
    pub job_id: String,
    pub dag: PipelineDag,
    pub fragment_count: u32,
    /// Soft deadline, seconds after arrival.
    pub deadline: f64,
    pub arrival_time: f64,
}

/// A broken job invariant. Display strings are stable and used in diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum JobViolation {
    #[error("job has no steps")]
    NoSteps,
    #[error("duplicate step id `{0}`")]
    DuplicateStepId(String),
    #[error("edge {from} -> {to} names unknown step `{missing}`")]
    UnknownEdgeEndpoint {
        from: String,
        to: String,
        missing: String,
    },
    #[error("cycle detected")]
    CycleDetected,
    #[error("step `{0}` must have at least one replica")]
    ZeroReplicas(String),
    #[error("step `{step_id}` service time {service_time} must be > 0")]
    NonPositiveServiceTime { step_id: String, service_time: f64 },
    #[error("step `{step_id}` service time {effective} s exceeds execution timeout {timeout} s")]
    ExceedsExecutionTimeout {
        step_id: String,
        effective: f64,
        timeout: f64,
    },
    #[error("step `{0}` fragment size must be > 0")]
    ZeroFragmentSize(String),
    #[error("fragment count must be >= 1")]
    NoFragments,
    #[error("deadline {0} must be > 0")]
    NonPositiveDeadline(f64),
    #[error("arrival time {0} must be >= 0")]
    NegativeArrival(f64),
}

/// Checks every job invariant and returns all violations found.
pub fn validate_job(job: &BatchJob, timeout: f64) -> Result<(), Vec<JobViolation>> {
    validate_job_with_speed(job, timeout, 1.0)
}

/// Like [`validate_job`], but checks the timeout rule against service times
/// stretched by the slowest region speed factor a step may run at.
pub fn validate_job_with_speed(
    job: &BatchJob,
    timeout: f64,
    slowest_speed_factor: f64,
) -> Result<(), Vec<JobViolation>> {
    let mut violations = Vec::new();
    let dag = &job.dag;
    if dag.steps.is_empty() {
        violations.push(JobViolation::NoSteps);
    }

    let mut seen = BTreeSet::new();
    for step in &dag.steps {
        if !seen.insert(step.step_id.as_str()) {
            violations.push(JobViolation::DuplicateStepId(step.step_id.clone()));
        }
        if step.replicas == 0 {
            violations.push(JobViolation::ZeroReplicas(step.step_id.clone()));
        }
        if !(step.service_time_per_fragment > 0.0) {
            violations.push(JobViolation::NonPositiveServiceTime {
                step_id: step.step_id.clone(),
                service_time: step.service_time_per_fragment,
            });
        } else {
            let effective = step.service_time_per_fragment / slowest_speed_factor;
            if effective > timeout {
                violations.push(JobViolation::ExceedsExecutionTimeout {
                    step_id: step.step_id.clone(),
                    effective,
                    timeout,
                });
            }
        }
        if step.fragment_size_bytes == 0 {
            violations.push(JobViolation::ZeroFragmentSize(step.step_id.clone()));
        }
    }

    let mut edges_ok = true;
    for (from, to) in &dag.edges {
        for endpoint in [from, to] {
            if !seen.contains(endpoint.as_str()) {
                edges_ok = false;
                violations.push(JobViolation::UnknownEdgeEndpoint {
                    from: from.clone(),
                    to: to.clone(),
                    missing: endpoint.clone(),
                });
            }
        }
    }
    // A graph without sources always contains a cycle, so the topological
    // sort covers the "at least one source" rule too.
    if edges_ok && !dag.steps.is_empty() && dag.topological_order().is_none() {
        violations.push(JobViolation::CycleDetected);
    }

    if job.fragment_count == 0 {
        violations.push(JobViolation::NoFragments);
    }
    if !(job.deadline > 0.0) {
        violations.push(JobViolation::NonPositiveDeadline(job.deadline));
    }
    if !(job.arrival_time >= 0.0) {
        violations.push(JobViolation::NegativeArrival(job.arrival_time));
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Lifecycle of a step inside a running job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepState {
    Pending,
    Running,
    Waiting,
    Completed,
}

impl StepState {
    pub fn can_transition_to(self, next: StepState) -> bool {
        use StepState::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Waiting) | (Waiting, Running) | (Running, Completed)
        )
    }
}

/// Where a step's replicas live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// Replica index to edge node id.
    Edge { assignments: BTreeMap<u32, usize> },
    Cloud { endpoint_label: String },
}

impl Placement {
    pub fn is_edge(&self) -> bool {
        matches!(self, Placement::Edge { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }

    fn step(cpu: u64, mem: u64, replicas: u32) -> StepSpec {
        StepSpec::new("s", ResourceVector::new(cpu, mem), replicas, 1.0)
    }

    fn linear_job(service: &[f64]) -> BatchJob {
        let steps = service
            .iter()
            .enumerate()
            .map(|(i, &t)| StepSpec::new(format!("s{i}"), ResourceVector::new(500, 128), 1, t))
            .collect();
        BatchJob {
            job_id: "j".into(),
            dag: PipelineDag::chain(steps),
            fragment_count: 4,
            deadline: 100.0,
            arrival_time: 0.0,
        }
    }

    #[test]
    fn rcost_examples() {
        let p = CostParams::default();
        assert_eq!(rcost(&step(0, 0, 7), &p), 0.0);
        assert!(close(rcost(&step(500, 128, 2), &p), 1025.6));
        assert!(close(rcost(&step(1000, 0, 1), &p), 1000.0));
    }

    #[test]
    fn total_cost_examples() {
        let p = CostParams::default();
        assert_eq!(total_cost(&step(500, 128, 2), &p, 0.0).unwrap(), 0.0);
        assert!(close(total_cost(&step(500, 128, 2), &p, 100.0).unwrap(), 102_560.0));
        assert!(close(total_cost(&step(1000, 0, 1), &p, 0.5).unwrap(), 500.0));
        assert!(matches!(
            total_cost(&step(1, 1, 1), &p, -1.0),
            Err(ModelError::NegativeDuration(_))
        ));
    }

    #[test]
    fn resource_subtraction_never_clamps() {
        let a = ResourceVector::new(1000, 10);
        assert_eq!(a.checked_sub(&ResourceVector::new(400, 10)).unwrap(), ResourceVector::new(600, 0));
        assert!(a.checked_sub(&ResourceVector::new(400, 11)).is_err());
        assert!(a.checked_sub(&ResourceVector::new(1001, 0)).is_err());
    }

    #[test]
    fn validate_examples() {
        assert!(validate_job(&linear_job(&[1.0, 1.0, 1.0]), 60.0).is_ok());

        let mut cyclic = linear_job(&[1.0, 1.0]);
        cyclic.dag.edges.push(("s1".into(), "s0".into()));
        let v = validate_job(&cyclic, 60.0).unwrap_err();
        assert!(v.iter().any(|e| e.to_string() == "cycle detected"));

        let v = validate_job(&linear_job(&[1.0, 61.0]), 60.0).unwrap_err();
        assert!(v[0].to_string().contains("exceeds execution timeout"));
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut job = linear_job(&[1.0, 1.0]);
        job.dag.steps[1].step_id = "s0".into();
        job.dag.steps[0].replicas = 0;
        job.fragment_count = 0;
        job.deadline = 0.0;
        let v = validate_job(&job, 60.0).unwrap_err();
        assert!(v.contains(&JobViolation::DuplicateStepId("s0".into())));
        assert!(v.contains(&JobViolation::ZeroReplicas("s0".into())));
        assert!(v.contains(&JobViolation::NoFragments));
        assert!(v.contains(&JobViolation::NonPositiveDeadline(0.0)));
        assert!(v.iter().any(|e| matches!(e, JobViolation::UnknownEdgeEndpoint { missing, .. } if missing == "s1")));
    }

    #[test]
    fn timeout_uses_slowest_region() {
        let job = linear_job(&[50.0]);
        assert!(validate_job(&job, 60.0).is_ok());
        // 50 s at 0.8x speed takes 62.5 s.
        assert!(validate_job_with_speed(&job, 60.0, 0.8).is_err());
    }

    #[test]
    fn step_state_transitions() {
        use StepState::*;
        let all = [Pending, Running, Waiting, Completed];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_transition_to(b))
            .collect();
        assert_eq!(
            legal,
            vec![(Pending, Running), (Pending, Waiting), (Running, Completed), (Waiting, Running)]
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rcost_linear_in_replicas(cpu in 0u64..8000, mem in 0u64..16384, r in 1u32..16, k in 1u32..8) {
                let p = CostParams::default();
                let base = rcost(&step(cpu, mem, r), &p);
                let scaled = rcost(&step(cpu, mem, r * k), &p);
                prop_assert!(close(scaled, base * k as f64));
            }

            #[test]
            fn rcost_monotone(cpu in 0u64..8000, mem in 0u64..16384, r in 1u32..16,
                              dc in 0u64..1000, dm in 0u64..1000, dr in 0u32..4) {
                let p = CostParams::default();
                let base = rcost(&step(cpu, mem, r), &p);
                prop_assert!(rcost(&step(cpu + dc, mem, r), &p) >= base);
                prop_assert!(rcost(&step(cpu, mem + dm, r), &p) >= base);
                prop_assert!(rcost(&step(cpu, mem, r + dr), &p) >= base);
            }

            #[test]
            fn total_cost_linear_in_time(t in 0.0f64..1e5, k in 0.0f64..100.0) {
                let p = CostParams::default();
                let s = step(750, 256, 3);
                let a = total_cost(&s, &p, t).unwrap();
                let b = total_cost(&s, &p, t * k).unwrap();
                prop_assert!(close(b, a * k));
            }

            /// Random graphs over n nodes: validate_job must agree with an
            /// independent DFS cycle check and the id/timeout rules.
            #[test]
            fn validate_matches_invariants(
                n in 1usize..7,
                raw_edges in proptest::collection::vec((0usize..7, 0usize..7), 0..12),
                services in proptest::collection::vec(0.5f64..80.0, 7),
                dup in any::<bool>(),
            ) {
                let mut steps: Vec<StepSpec> = (0..n)
                    .map(|i| StepSpec::new(format!("s{i}"), ResourceVector::new(100, 10), 1, services[i]))
                    .collect();
                if dup && n > 1 {
                    steps[1].step_id = "s0".into();
                }
                let edges: Vec<(usize, usize)> = raw_edges.into_iter().filter(|&(a, b)| a < n && b < n).collect();
                let job = BatchJob {
                    job_id: "j".into(),
                    dag: PipelineDag {
                        steps,
                        edges: edges.iter().map(|&(a, b)| (format!("s{a}"), format!("s{b}"))).collect(),
                    },
                    fragment_count: 3,
                    deadline: 10.0,
                    arrival_time: 0.0,
                };

                let has_dup = dup && n > 1;
                let too_slow = services[..n].iter().any(|&t| t > 60.0);
                let cyclic = if has_dup { false } else { dfs_has_cycle(n, &edges) };
                let expect_ok = !has_dup && !too_slow && !cyclic;
                let result = validate_job(&job, 60.0);
                prop_assert_eq!(result.is_ok(), expect_ok, "{:?}", result);
                if !has_dup {
                    let reported = result.err().map(|v| v.contains(&JobViolation::CycleDetected)).unwrap_or(false);
                    prop_assert_eq!(reported, cyclic);
                }
            }
        }

        fn dfs_has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
            fn visit(u: usize, adj: &[Vec<usize>], color: &mut [u8]) -> bool {
                color[u] = 1;
                for &v in &adj[u] {
                    if color[v] == 1 || (color[v] == 0 && visit(v, adj, color)) {
                        return true;
                    }
                }
                color[u] = 2;
                false
            }
            let mut adj = vec![Vec::new(); n];
            for &(a, b) in edges {
                adj[a].push(b);
            }
            let mut color = vec![0u8; n];
            (0..n).any(|u| color[u] == 0 && visit(u, &adj, &mut color))
        }
    }
}
