//! Multi-run experiments: placement sweeps, hybrid vs cloud-only pairing and
//! seed replication. Runs inside one experiment are independent and execute
//! on separate threads; each writes to its own directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{cost_percentage, emit_report, fmt_sig, EmitOptions, MetricsError, RunReport};
use crate::placement::PlacementPolicy;
use crate::sim::{run, ArrivalProcess, Scenario, SimError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("replicate needs poisson arrivals to reseed")]
    NotSeeded,
    #[error("no seeds given")]
    NoSeeds,
}

impl ExperimentError {
    /// Whether the failure stems from the input rather than an internal
    /// inconsistency found while running.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            ExperimentError::NotSeeded
                | ExperimentError::NoSeeds
                | ExperimentError::Sim(
                    SimError::InvalidScenario(_) | SimError::Arrivals(_) | SimError::InvalidJob { .. } | SimError::UnknownFaultJob(_)
                )
        )
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_all(scenarios: &[Scenario]) -> Result<Vec<RunReport>, SimError> {
    thread::scope(|scope| {
        let handles: Vec<_> = scenarios.iter().map(|s| scope.spawn(move || run(s))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    })
}

/// One run, written to `<out>/run`.
pub fn run_single(scenario: &Scenario, out: &Path, emit: EmitOptions) -> Result<RunReport, ExperimentError> {
    let report = run(scenario)?;
    emit_report(&report, &out.join("run"), emit)?;
    Ok(report)
}

/// One run per placement policy on the same arrival schedule, written to
/// `<out>/<policy>`.
pub fn sweep(
    scenario: &Scenario,
    policies: &[PlacementPolicy],
    out: &Path,
    emit: EmitOptions,
) -> Result<Vec<(PlacementPolicy, RunReport)>, ExperimentError> {
    let scenarios: Vec<Scenario> = policies
        .iter()
        .map(|&p| {
            let mut s = scenario.clone();
            s.scheduler.placement = p;
            s
        })
        .collect();
    let reports = run_all(&scenarios)?;
    for (p, r) in policies.iter().zip(&reports) {
        emit_report(r, &out.join(p.short_name()), emit)?;
    }
    Ok(policies.iter().copied().zip(reports).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineComparison {
    pub hybrid_cost: f64,
    pub cloud_only_cost: f64,
    /// Hybrid cost as a percentage of the cloud-only cost.
    pub cost_percentage: f64,
    pub cost_reduction_percentage: f64,
    pub hybrid_mean_utilization: Option<f64>,
    pub hybrid_deadline_met_fraction: f64,
    pub cloud_only_deadline_met_fraction: f64,
}

impl BaselineComparison {
    pub fn from_reports(hybrid: &RunReport, cloud_only: &RunReport) -> Result<Self, MetricsError> {
        let pct = cost_percentage(hybrid.total_cost, cloud_only.total_cost)?;
        Ok(Self {
            hybrid_cost: hybrid.total_cost,
            cloud_only_cost: cloud_only.total_cost,
            cost_percentage: pct,
            cost_reduction_percentage: 100.0 - pct,
            hybrid_mean_utilization: hybrid.mean_utilization,
            hybrid_deadline_met_fraction: hybrid.deadline_met_fraction,
            cloud_only_deadline_met_fraction: cloud_only.deadline_met_fraction,
        })
    }
}

/// Paired hybrid and cloud-only runs on identical arrivals, written to
/// `<out>/hybrid`, `<out>/cloud_only` and `<out>/baseline.json`.
pub fn baseline(scenario: &Scenario, out: &Path, emit: EmitOptions) -> Result<(BaselineComparison, RunReport, RunReport), ExperimentError> {
    let (hybrid, cloud_only) = run_pair(scenario)?;
    emit_report(&hybrid, &out.join("hybrid"), emit)?;
    emit_report(&cloud_only, &out.join("cloud_only"), emit)?;
    let comparison = BaselineComparison::from_reports(&hybrid, &cloud_only)?;
    write_json(&out.join("baseline.json"), &comparison)?;
    if emit.plot_data {
        let path = out.join("plot_cost.csv");
        let text = format!(
            "policy,total_cost,percentage_of_baseline\ncloud_only,{},100\n{},{},{}\n",
            fmt_sig(cloud_only.total_cost),
            hybrid.placement,
            fmt_sig(hybrid.total_cost),
            fmt_sig(comparison.cost_percentage)
        );
        fs::write(&path, text).map_err(|source| ExperimentError::Io { path, source })?;
    }
    Ok((comparison, hybrid, cloud_only))
}

fn run_pair(scenario: &Scenario) -> Result<(RunReport, RunReport), ExperimentError> {
    let mut reports = run_all(&[scenario.clone(), scenario.cloud_only()])?;
    let cloud_only = reports.pop().expect("two runs");
    let hybrid = reports.pop().expect("two runs");
    Ok((hybrid, cloud_only))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub hybrid_cost: f64,
    pub cloud_only_cost: f64,
    pub cost_percentage: f64,
    pub mean_utilization: Option<f64>,
    pub deadline_met_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub stddev: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stddev, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateSummary {
    pub seeds: Vec<SeedResult>,
    pub hybrid_cost: Option<Aggregate>,
    pub cost_percentage: Option<Aggregate>,
    pub mean_utilization: Option<Aggregate>,
    pub deadline_met_fraction: Option<Aggregate>,
}

/// Baseline pairs for each seed, written to `<out>/seed-<s>/{hybrid,cloud_only}`
/// plus `<out>/replicate.json`.
pub fn replicate(scenario: &Scenario, seeds: &[u64], out: &Path, emit: EmitOptions) -> Result<ReplicateSummary, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let mut scenarios = Vec::new();
    for &seed in seeds {
        let mut s = scenario.clone();
        match &mut s.arrivals {
            ArrivalProcess::Poisson { seed: slot, .. } => *slot = seed,
            ArrivalProcess::Explicit(_) => return Err(ExperimentError::NotSeeded),
        }
        scenarios.push(s.clone());
        scenarios.push(s.cloud_only());
    }
    let reports = run_all(&scenarios)?;
    let mut results = Vec::new();
    for (&seed, pair) in seeds.iter().zip(reports.chunks(2)) {
        let (hybrid, cloud_only) = (&pair[0], &pair[1]);
        let dir = out.join(format!("seed-{seed}"));
        emit_report(hybrid, &dir.join("hybrid"), emit)?;
        emit_report(cloud_only, &dir.join("cloud_only"), emit)?;
        results.push(SeedResult {
            seed,
            hybrid_cost: hybrid.total_cost,
            cloud_only_cost: cloud_only.total_cost,
            cost_percentage: cost_percentage(hybrid.total_cost, cloud_only.total_cost)?,
            mean_utilization: hybrid.mean_utilization,
            deadline_met_fraction: hybrid.deadline_met_fraction,
        });
    }
    let col = |f: &dyn Fn(&SeedResult) -> Option<f64>| Aggregate::of(&results.iter().filter_map(f).collect::<Vec<_>>());
    let summary = ReplicateSummary {
        hybrid_cost: col(&|r| Some(r.hybrid_cost)),
        cost_percentage: col(&|r| Some(r.cost_percentage)),
        mean_utilization: col(&|r| r.mean_utilization),
        deadline_met_fraction: col(&|r| Some(r.deadline_met_fraction)),
        seeds: results,
    };
    write_json(&out.join("replicate.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_stddev() {
        let a = Aggregate::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(a.mean, 5.0);
        assert!((a.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(Aggregate::of(&[3.0]).unwrap().stddev, 0.0);
        assert!(Aggregate::of(&[]).is_none());
    }
}
