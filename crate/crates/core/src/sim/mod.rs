//! Discrete-event simulation of the edge cluster, the cloud, the scheduler
//! and one driver per job.

mod arrivals;
mod engine;
mod event;

pub use arrivals::{generate_arrivals, ArrivalError, ArrivalProcess, ExplicitArrival, JobArrival, JobTemplate};
pub use engine::{run, simulate, SimError, SimOptions, SimRun};
pub use event::{Event, EventKind};

use serde::{Deserialize, Serialize};

use crate::model::ResourceVector;
use crate::scheduler::{SchedulerConfig, SchedulingMode};

pub const DEFAULT_EDGE_SPEED_FACTOR: f64 = 0.8;
pub const DEFAULT_CLOUD_SPEED_FACTOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCluster {
    pub nodes: usize,
    pub capacity: ResourceVector,
    pub speed_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRegion {
    pub speed_factor: f64,
    /// Driver concurrency against cloud deployments; defaults to the step's
    /// replica count.
    pub concurrency: Option<usize>,
}

impl Default for CloudRegion {
    fn default() -> Self {
        Self {
            speed_factor: DEFAULT_CLOUD_SPEED_FACTOR,
            concurrency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fault {
    NodeFailure { time: f64, node: usize },
    DriverRestart { time: f64, job_id: String },
}

impl Fault {
    pub fn time(&self) -> f64 {
        match self {
            Fault::NodeFailure { time, .. } | Fault::DriverRestart { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub edge: EdgeCluster,
    pub cloud: CloudRegion,
    pub scheduler: SchedulerConfig,
    pub execution_timeout: f64,
    /// Stop time; `None` runs until every job has completed.
    pub horizon: Option<f64>,
    pub templates: Vec<JobTemplate>,
    pub arrivals: ArrivalProcess,
    pub faults: Vec<Fault>,
}

impl Scenario {
    /// The same scenario with every step sent to the cloud.
    pub fn cloud_only(&self) -> Scenario {
        let mut s = self.clone();
        s.scheduler.mode = SchedulingMode::CloudOnly;
        s
    }

    /// Slowest speed factor a step may run at under this scenario's policy.
    pub fn slowest_speed_factor(&self) -> f64 {
        match self.scheduler.mode {
            SchedulingMode::CloudOnly => self.cloud.speed_factor,
            SchedulingMode::CheapestFirst => self.edge.speed_factor.min(self.cloud.speed_factor),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        if !(self.edge.speed_factor > 0.0) {
            return bad("edge speed factor must be > 0".into());
        }
        if !(self.cloud.speed_factor > 0.0) {
            return bad("cloud speed factor must be > 0".into());
        }
        if self.cloud.concurrency == Some(0) {
            return bad("cloud concurrency must be >= 1".into());
        }
        if !(self.scheduler.round_length > 0.0) {
            return bad("round length must be > 0".into());
        }
        if !(self.scheduler.eviction_deadline >= 0.0) {
            return bad("eviction deadline must be >= 0".into());
        }
        if !(self.execution_timeout > 0.0) {
            return bad("execution timeout must be > 0".into());
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return bad("horizon must be > 0".into());
            }
        }
        for fault in &self.faults {
            if !(fault.time() >= 0.0) {
                return bad(format!("fault time {} must be >= 0", fault.time()));
            }
            if let Fault::NodeFailure { node, .. } = fault {
                if *node >= self.edge.nodes {
                    return bad(format!("fault names node {node} but the edge has {} nodes", self.edge.nodes));
                }
            }
        }
        Ok(())
    }
}
