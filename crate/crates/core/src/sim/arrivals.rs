//! Job arrival generation. Poisson arrivals use Xoshiro256** seeded through
//! SplitMix64, so a (seed, rate, count, templates) tuple always yields the
//! same sequence.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::model::{BatchJob, PipelineDag};

/// Reusable job shape; arrivals instantiate it with an id and arrival time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTemplate {
    pub name: String,
    pub dag: PipelineDag,
    pub fragment_count: u32,
    /// Relative deadline in seconds.
    pub deadline: f64,
}

impl JobTemplate {
    pub fn instantiate(&self, job_id: String, arrival_time: f64) -> BatchJob {
        BatchJob {
            job_id,
            dag: self.dag.clone(),
            fragment_count: self.fragment_count,
            deadline: self.deadline,
            arrival_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitArrival {
    pub time: f64,
    /// Defaults to cycling through the catalog in order.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalProcess {
    Poisson { rate: f64, seed: u64, count: usize },
    Explicit(Vec<ExplicitArrival>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobArrival {
    pub template: String,
    pub job: BatchJob,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArrivalError {
    #[error("no job templates defined")]
    NoTemplates,
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("arrival rate must be > 0")]
    NonPositiveRate,
    #[error("arrival time {0} must be >= 0")]
    NegativeTime(f64),
    #[error("duplicate job id `{0}`")]
    DuplicateJobId(String),
}

/// Uniform sample in [0, 1) from the top 53 bits.
fn unit(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Arrivals sorted by time. Poisson job `i` draws its interarrival gap and
/// then its template, and is named `<template>-<i>`.
pub fn generate_arrivals(process: &ArrivalProcess, templates: &[JobTemplate]) -> Result<Vec<JobArrival>, ArrivalError> {
    if templates.is_empty() {
        return Err(ArrivalError::NoTemplates);
    }
    let mut out = Vec::new();
    match process {
        ArrivalProcess::Poisson { rate, seed, count } => {
            if !(*rate > 0.0) {
                return Err(ArrivalError::NonPositiveRate);
            }
            let mut rng = Xoshiro256StarStar::seed_from_u64(*seed);
            let mut t = 0.0;
            for i in 0..*count {
                t += -(1.0 - unit(&mut rng)).ln() / rate;
                let pick = ((unit(&mut rng) * templates.len() as f64) as usize).min(templates.len() - 1);
                let template = &templates[pick];
                out.push(JobArrival {
                    template: template.name.clone(),
                    job: template.instantiate(format!("{}-{i}", template.name), t),
                });
            }
        }
        ArrivalProcess::Explicit(list) => {
            for (i, a) in list.iter().enumerate() {
                if !(a.time >= 0.0) {
                    return Err(ArrivalError::NegativeTime(a.time));
                }
                let template = match &a.template {
                    Some(name) => templates
                        .iter()
                        .find(|t| &t.name == name)
                        .ok_or_else(|| ArrivalError::UnknownTemplate(name.clone()))?,
                    None => &templates[i % templates.len()],
                };
                let job_id = a.job_id.clone().unwrap_or_else(|| format!("{}-{i}", template.name));
                out.push(JobArrival {
                    template: template.name.clone(),
                    job: template.instantiate(job_id, a.time),
                });
            }
            out.sort_by(|a, b| a.job.arrival_time.total_cmp(&b.job.arrival_time));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in &out {
        if !seen.insert(a.job.job_id.as_str()) {
            return Err(ArrivalError::DuplicateJobId(a.job.job_id.clone()));
        }
    }
    Ok(out)
}
