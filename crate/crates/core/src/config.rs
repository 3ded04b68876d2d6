//! JSON scenario files. Unknown keys are rejected; every invariant violation
//! is reported at once with the path of the offending field.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CostParams, PipelineDag, ResourceVector, StepSpec, DEFAULT_EXECUTION_TIMEOUT};
use crate::placement::PlacementPolicy;
use crate::scheduler::{SchedulerConfig, SchedulingMode, DEFAULT_EVICTION_DEADLINE, DEFAULT_ROUND_LENGTH};
use crate::sim::{
    generate_arrivals, ArrivalProcess, CloudRegion, EdgeCluster, ExplicitArrival, Fault, JobTemplate, Scenario,
    DEFAULT_CLOUD_SPEED_FACTOR, DEFAULT_EDGE_SPEED_FACTOR,
};

/// The only generator the schema accepts.
pub const RNG_NAME: &str = "xoshiro256**";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{field}: {message}")]
    Parse { field: String, message: String },
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
}

impl ConfigError {
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(d) => d.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

fn default_edge_speed() -> f64 {
    DEFAULT_EDGE_SPEED_FACTOR
}
fn default_cloud_speed() -> f64 {
    DEFAULT_CLOUD_SPEED_FACTOR
}
fn default_round() -> f64 {
    DEFAULT_ROUND_LENGTH
}
fn default_eviction() -> f64 {
    DEFAULT_EVICTION_DEADLINE
}
fn default_timeout() -> f64 {
    DEFAULT_EXECUTION_TIMEOUT
}
fn default_c_cpu() -> f64 {
    CostParams::default().c_cpu
}
fn default_c_mem() -> f64 {
    CostParams::default().c_mem
}
fn default_replicas() -> u32 {
    1
}
fn default_true() -> bool {
    true
}
fn default_fragment_size() -> u64 {
    1 << 20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub edge: EdgeConfig,
    #[serde(default)]
    pub cloud: CloudConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    pub workload: WorkloadConfig,
    pub arrivals: ArrivalsConfig,
    #[serde(default)]
    pub faults: Vec<FaultConfig>,
    /// Default output directory for the CLI.
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub nodes: usize,
    pub cpu_millicores: u64,
    pub memory_mb: u64,
    #[serde(default = "default_edge_speed")]
    pub speed_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudConfig {
    #[serde(default = "default_cloud_speed")]
    pub speed_factor: f64,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            speed_factor: default_cloud_speed(),
            concurrency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "default_c_cpu")]
    pub c_cpu: f64,
    #[serde(default = "default_c_mem")]
    pub c_mem: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            c_cpu: default_c_cpu(),
            c_mem: default_c_mem(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default)]
    pub policy: SchedulingMode,
    #[serde(default)]
    pub placement: PlacementPolicy,
    #[serde(default = "default_round")]
    pub round_length: f64,
    #[serde(default = "default_eviction")]
    pub eviction_deadline: f64,
    #[serde(default = "default_timeout")]
    pub execution_timeout: f64,
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            policy: SchedulingMode::default(),
            placement: PlacementPolicy::default(),
            round_length: default_round(),
            eviction_deadline: default_eviction(),
            execution_timeout: default_timeout(),
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub templates: Vec<TemplateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub name: String,
    pub fragment_count: u32,
    /// Relative deadline in seconds.
    pub deadline: f64,
    pub steps: Vec<StepConfig>,
    /// Invocation edges; omitted means a chain in step order.
    #[serde(default)]
    pub edges: Option<Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub id: String,
    pub cpu_millicores: u64,
    pub memory_mb: u64,
    #[serde(default = "default_replicas")]
    pub replicas: u32,
    pub service_time: f64,
    #[serde(default = "default_true")]
    pub feed_forward: bool,
    #[serde(default = "default_fragment_size")]
    pub fragment_size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalsConfig {
    Poisson {
        rate: f64,
        seed: u64,
        count: usize,
        #[serde(default)]
        rng: Option<String>,
    },
    Explicit { arrivals: Vec<ExplicitArrival> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultConfig {
    NodeFailure { time: f64, node: usize },
    DriverRestart { time: f64, job: String },
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let diagnostics = config.validate();
    if diagnostics.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(diagnostics))
    }
}

struct Diagnostics(Vec<Diagnostic>);

impl Diagnostics {
    fn check(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.0.push(Diagnostic {
                field: field.into(),
                message: message.into(),
            });
        }
    }
}

impl ScenarioConfig {
    /// Every invariant violation, in document order.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut d = Diagnostics(Vec::new());
        d.check(!self.name.is_empty(), "name", "must not be empty");

        let e = &self.edge;
        if e.nodes > 0 {
            d.check(e.cpu_millicores > 0, "edge.cpu_millicores", "must be > 0");
            d.check(e.memory_mb > 0, "edge.memory_mb", "must be > 0");
        }
        d.check(e.speed_factor > 0.0, "edge.speed_factor", "must be > 0");
        d.check(self.cloud.speed_factor > 0.0, "cloud.speed_factor", "must be > 0");
        d.check(self.cloud.concurrency != Some(0), "cloud.concurrency", "must be >= 1");
        d.check(self.cost.c_cpu >= 0.0, "cost.c_cpu", "must be >= 0");
        d.check(self.cost.c_mem >= 0.0, "cost.c_mem", "must be >= 0");

        let s = &self.scheduler;
        d.check(s.round_length > 0.0, "scheduler.round_length", "must be > 0");
        d.check(s.eviction_deadline >= 0.0, "scheduler.eviction_deadline", "must be >= 0");
        d.check(s.execution_timeout > 0.0, "scheduler.execution_timeout", "must be > 0");
        if let Some(h) = s.horizon {
            d.check(h > 0.0, "scheduler.horizon", "must be > 0");
        }

        let slowest = match s.policy {
            SchedulingMode::CloudOnly => self.cloud.speed_factor,
            SchedulingMode::CheapestFirst => e.speed_factor.min(self.cloud.speed_factor),
        };
        let templates = &self.workload.templates;
        d.check(!templates.is_empty(), "workload.templates", "must not be empty");
        let mut names = BTreeSet::new();
        for (ti, t) in templates.iter().enumerate() {
            let at = format!("workload.templates[{ti}]");
            d.check(names.insert(t.name.as_str()), format!("{at}.name"), format!("duplicate template name `{}`", t.name));
            d.check(t.fragment_count >= 1, format!("{at}.fragment_count"), "must be >= 1");
            d.check(t.deadline > 0.0, format!("{at}.deadline"), "must be > 0");
            d.check(!t.steps.is_empty(), format!("{at}.steps"), "must not be empty");
            let mut ids = BTreeSet::new();
            for (si, step) in t.steps.iter().enumerate() {
                let at = format!("{at}.steps[{si}]");
                d.check(ids.insert(step.id.as_str()), format!("{at}.id"), format!("duplicate step id `{}`", step.id));
                d.check(step.replicas >= 1, format!("{at}.replicas"), "must be >= 1");
                d.check(step.fragment_size_bytes > 0, format!("{at}.fragment_size_bytes"), "must be > 0");
                if step.service_time > 0.0 {
                    let effective = step.service_time / slowest;
                    d.check(
                        effective <= s.execution_timeout,
                        format!("{at}.service_time"),
                        format!(
                            "{} s (at speed factor {slowest}) exceeds the execution timeout of {} s",
                            step.service_time, s.execution_timeout
                        ),
                    );
                } else {
                    d.check(false, format!("{at}.service_time"), "must be > 0");
                }
            }
            if let Some(edges) = &t.edges {
                for (ei, (a, b)) in edges.iter().enumerate() {
                    for end in [a, b] {
                        d.check(ids.contains(end.as_str()), format!("{at}.edges[{ei}]"), format!("unknown step `{end}`"));
                    }
                }
            }
            let dag = template_dag(t);
            let edges_known = dag
                .edges
                .iter()
                .all(|(a, b)| dag.index_of(a).is_some() && dag.index_of(b).is_some());
            if edges_known && ids.len() == t.steps.len() {
                d.check(dag.topological_order().is_some(), format!("{at}.edges"), "cycle detected");
            }
        }

        match &self.arrivals {
            ArrivalsConfig::Poisson { rate, rng, .. } => {
                d.check(*rate > 0.0, "arrivals.rate", "must be > 0");
                if let Some(name) = rng {
                    d.check(name == RNG_NAME, "arrivals.rng", format!("must be \"{RNG_NAME}\""));
                }
            }
            ArrivalsConfig::Explicit { arrivals } => {
                let mut ids = BTreeSet::new();
                for (i, a) in arrivals.iter().enumerate() {
                    d.check(a.time >= 0.0, format!("arrivals.arrivals[{i}].time"), "must be >= 0");
                    if let Some(name) = &a.template {
                        d.check(names.contains(name.as_str()), format!("arrivals.arrivals[{i}].template"), format!("unknown template `{name}`"));
                    }
                    if let Some(id) = &a.job_id {
                        d.check(ids.insert(id.as_str()), format!("arrivals.arrivals[{i}].job_id"), format!("duplicate job id `{id}`"));
                    }
                }
            }
        }

        for (i, f) in self.faults.iter().enumerate() {
            let (time, at) = match f {
                FaultConfig::NodeFailure { time, .. } | FaultConfig::DriverRestart { time, .. } => (*time, format!("faults[{i}]")),
            };
            d.check(time >= 0.0, format!("{at}.time"), "must be >= 0");
            if let (Some(h), true) = (s.horizon, time >= 0.0) {
                d.check(time <= h, format!("{at}.time"), "must be within scheduler.horizon");
            }
            if let FaultConfig::NodeFailure { node, .. } = f {
                d.check(*node < e.nodes, format!("{at}.node"), format!("must be < edge.nodes ({})", e.nodes));
            }
        }
        let mut failed = BTreeSet::new();
        for (i, f) in self.faults.iter().enumerate() {
            if let FaultConfig::NodeFailure { node, .. } = f {
                d.check(failed.insert(*node), format!("faults[{i}].node"), format!("node {node} already fails earlier in the list"));
            }
        }

        // Job ids named by driver restarts must exist in the arrival schedule.
        if d.0.is_empty() {
            let wanted: Vec<(usize, &String)> = self
                .faults
                .iter()
                .enumerate()
                .filter_map(|(i, f)| match f {
                    FaultConfig::DriverRestart { job, .. } => Some((i, job)),
                    _ => None,
                })
                .collect();
            if !wanted.is_empty() {
                match generate_arrivals(&self.arrival_process(), &self.templates()) {
                    Ok(arrivals) => {
                        let ids: BTreeSet<&str> = arrivals.iter().map(|a| a.job.job_id.as_str()).collect();
                        for (i, job) in wanted {
                            d.check(ids.contains(job.as_str()), format!("faults[{i}].job"), format!("unknown job `{job}`"));
                        }
                    }
                    Err(e) => d.check(false, "arrivals", e.to_string()),
                }
            }
        }
        d.0
    }

    pub fn templates(&self) -> Vec<JobTemplate> {
        self.workload
            .templates
            .iter()
            .map(|t| JobTemplate {
                name: t.name.clone(),
                dag: template_dag(t),
                fragment_count: t.fragment_count,
                deadline: t.deadline,
            })
            .collect()
    }

    pub fn arrival_process(&self) -> ArrivalProcess {
        match &self.arrivals {
            ArrivalsConfig::Poisson { rate, seed, count, .. } => ArrivalProcess::Poisson {
                rate: *rate,
                seed: *seed,
                count: *count,
            },
            ArrivalsConfig::Explicit { arrivals } => ArrivalProcess::Explicit(arrivals.clone()),
        }
    }

    pub fn to_scenario(&self) -> Scenario {
        Scenario {
            name: self.name.clone(),
            edge: EdgeCluster {
                nodes: self.edge.nodes,
                capacity: ResourceVector::new(self.edge.cpu_millicores, self.edge.memory_mb),
                speed_factor: self.edge.speed_factor,
            },
            cloud: CloudRegion {
                speed_factor: self.cloud.speed_factor,
                concurrency: self.cloud.concurrency,
            },
            scheduler: SchedulerConfig {
                mode: self.scheduler.policy,
                placement: self.scheduler.placement,
                round_length: self.scheduler.round_length,
                eviction_deadline: self.scheduler.eviction_deadline,
                cost: CostParams {
                    c_cpu: self.cost.c_cpu,
                    c_mem: self.cost.c_mem,
                },
            },
            execution_timeout: self.scheduler.execution_timeout,
            horizon: self.scheduler.horizon,
            templates: self.templates(),
            arrivals: self.arrival_process(),
            faults: self
                .faults
                .iter()
                .map(|f| match f {
                    FaultConfig::NodeFailure { time, node } => Fault::NodeFailure { time: *time, node: *node },
                    FaultConfig::DriverRestart { time, job } => Fault::DriverRestart {
                        time: *time,
                        job_id: job.clone(),
                    },
                })
                .collect(),
        }
    }
}

fn template_dag(t: &TemplateConfig) -> PipelineDag {
    let steps: Vec<StepSpec> = t
        .steps
        .iter()
        .map(|s| StepSpec {
            step_id: s.id.clone(),
            demand_per_replica: ResourceVector::new(s.cpu_millicores, s.memory_mb),
            replicas: s.replicas,
            service_time_per_fragment: s.service_time,
            feed_forward: s.feed_forward,
            fragment_size_bytes: s.fragment_size_bytes,
        })
        .collect();
    match &t.edges {
        Some(edges) => PipelineDag {
            steps,
            edges: edges.clone(),
        },
        None => PipelineDag::chain(steps),
    }
}
