//! Run measurements: edge utilization trace, cloud cost ledger, job outcomes,
//! and the CSV/JSON artifacts written after a run.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("utilization trace is empty")]
    EmptyTrace,
    #[error("invalid window [{t0}, {t1}]")]
    InvalidWindow { t0: f64, t1: f64 },
    #[error("trace does not cover window start {0}")]
    WindowNotCovered(f64),
    #[error("baseline cost is zero while compared cost is {0}")]
    ZeroBaseline(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Edge,
    Cloud,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Edge => "edge",
            Region::Cloud => "cloud",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub time: f64,
    pub allocated_cpu_millicores: u64,
    /// Capacity of alive nodes only.
    pub capacity_cpu_millicores: u64,
    pub allocated_memory_mb: u64,
    pub capacity_memory_mb: u64,
}

impl UtilizationSample {
    pub fn cpu_utilization(&self) -> f64 {
        if self.capacity_cpu_millicores == 0 {
            0.0
        } else {
            self.allocated_cpu_millicores as f64 / self.capacity_cpu_millicores as f64
        }
    }
}

/// One deployment interval of a step in one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedgerEntry {
    pub job_id: String,
    pub step_id: String,
    pub rcost_per_second: f64,
    pub deploy_start: f64,
    pub deploy_end: f64,
    pub region: Region,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job_id: String,
    pub template: String,
    pub arrival: f64,
    /// `None` when the run stopped at its horizon first.
    pub completion: Option<f64>,
    pub duration: Option<f64>,
    pub deadline: f64,
    pub met: bool,
    pub miss_by: f64,
}

impl JobOutcome {
    pub fn completed(job_id: String, template: String, arrival: f64, completion: f64, deadline: f64) -> Self {
        let duration = completion - arrival;
        Self {
            job_id,
            template,
            arrival,
            completion: Some(completion),
            duration: Some(duration),
            deadline,
            met: duration <= deadline,
            miss_by: (duration - deadline).max(0.0),
        }
    }

    pub fn unfinished(job_id: String, template: String, arrival: f64, horizon: f64, deadline: f64) -> Self {
        Self {
            job_id,
            template,
            arrival,
            completion: None,
            duration: None,
            deadline,
            met: false,
            miss_by: (horizon - arrival - deadline).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub job_id: String,
    pub template: String,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: String,
    pub policy: String,
    pub placement: String,
    pub utilization: Vec<UtilizationSample>,
    /// Interval over which `mean_utilization` is measured: from the first
    /// edge allocation to the last round that had requests to place.
    pub busy_interval: Option<(f64, f64)>,
    pub mean_utilization: Option<f64>,
    pub peak_utilization: f64,
    pub ledger: Vec<CostLedgerEntry>,
    pub total_cost: f64,
    pub outcomes: Vec<JobOutcome>,
    pub deadline_met_fraction: f64,
    pub arrivals: Vec<ArrivalRecord>,
    pub end_time: f64,
    pub horizon_reached: bool,
}

impl RunReport {
    /// Fills derived fields (sorting, totals, utilization summaries).
    pub fn finish(&mut self, last_round_with_requests: Option<f64>) {
        self.ledger.sort_by(|a, b| {
            (&a.job_id, &a.step_id)
                .cmp(&(&b.job_id, &b.step_id))
                .then(a.deploy_start.total_cmp(&b.deploy_start))
        });
        self.outcomes
            .sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then_with(|| a.job_id.cmp(&b.job_id)));
        self.total_cost = self.ledger.iter().map(|e| e.cost).sum();
        self.deadline_met_fraction = if self.outcomes.is_empty() {
            0.0
        } else {
            self.outcomes.iter().filter(|o| o.met).count() as f64 / self.outcomes.len() as f64
        };
        self.peak_utilization = self
            .utilization
            .iter()
            .map(UtilizationSample::cpu_utilization)
            .fold(0.0, f64::max);
        self.busy_interval = busy_interval(&self.utilization, last_round_with_requests);
        self.mean_utilization = self
            .busy_interval
            .and_then(|(t0, t1)| time_weighted_utilization(&self.utilization, t0, t1).ok());
    }

    pub fn met_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.met).count()
    }

    pub fn missed(&self) -> impl Iterator<Item = &JobOutcome> {
        self.outcomes.iter().filter(|o| !o.met)
    }
}

fn busy_interval(trace: &[UtilizationSample], last_round: Option<f64>) -> Option<(f64, f64)> {
    let start = trace.iter().find(|s| s.allocated_cpu_millicores > 0)?.time;
    let end = match last_round {
        Some(t) if t > start => t,
        // Everything was placed in one round: use the span the edge stayed busy.
        _ => {
            let idx = trace.iter().rposition(|s| s.allocated_cpu_millicores > 0)?;
            trace.get(idx + 1)?.time
        }
    };
    (end > start).then_some((start, end))
}

/// Time-weighted mean CPU utilization over `[t0, t1]`, treating the trace as
/// piecewise constant from each sample to the next.
pub fn time_weighted_utilization(trace: &[UtilizationSample], t0: f64, t1: f64) -> Result<f64, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    if !(t0 < t1) {
        return Err(MetricsError::InvalidWindow { t0, t1 });
    }
    if trace[0].time > t0 {
        return Err(MetricsError::WindowNotCovered(t0));
    }
    let mut integral = 0.0;
    for (i, sample) in trace.iter().enumerate() {
        let seg_start = sample.time.max(t0);
        let seg_end = trace.get(i + 1).map_or(t1, |next| next.time).min(t1);
        if seg_end > seg_start {
            integral += sample.cpu_utilization() * (seg_end - seg_start);
        }
    }
    Ok(integral / (t1 - t0))
}

/// Cost of `report` as a percentage of `baseline`.
pub fn cost_vs_baseline(report: &RunReport, baseline: &RunReport) -> Result<f64, MetricsError> {
    cost_percentage(report.total_cost, baseline.total_cost)
}

pub fn cost_percentage(cost: f64, baseline_cost: f64) -> Result<f64, MetricsError> {
    if baseline_cost == 0.0 {
        if cost == 0.0 {
            // Nothing was billed on either side.
            return Ok(100.0);
        }
        return Err(MetricsError::ZeroBaseline(cost));
    }
    Ok(100.0 * cost / baseline_cost)
}

/// Formats like C's `%.9g`.
pub fn fmt_sig(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value `fmt_sig` prints, for JSON output.
fn sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EmitOptions {
    /// Adds downsampled series for plotting.
    pub plot_data: bool,
    /// Bucket width for the downsampled utilization series.
    pub plot_bucket: f64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario_id: &'a str,
    policy: &'a str,
    placement: &'a str,
    job_count: usize,
    jobs_completed: usize,
    total_cost: f64,
    cloud_seconds: f64,
    mean_utilization: Option<f64>,
    busy_interval: Option<(f64, f64)>,
    peak_utilization: f64,
    deadline_met_fraction: f64,
    deadlines_met: usize,
    deadlines_missed: usize,
    misses: Vec<Miss<'a>>,
    end_time: f64,
    horizon_reached: bool,
}

#[derive(Debug, Serialize)]
struct Miss<'a> {
    job_id: &'a str,
    miss_by: f64,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), MetricsError> {
    fs::write(path, contents).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn summary_json(report: &RunReport) -> String {
    let summary = Summary {
        scenario_id: &report.scenario_id,
        policy: &report.policy,
        placement: &report.placement,
        job_count: report.outcomes.len(),
        jobs_completed: report.outcomes.iter().filter(|o| o.completion.is_some()).count(),
        total_cost: sig(report.total_cost),
        cloud_seconds: sig(
            report
                .ledger
                .iter()
                .filter(|e| e.region == Region::Cloud)
                .map(|e| e.deploy_end - e.deploy_start)
                .sum(),
        ),
        mean_utilization: report.mean_utilization.map(sig),
        busy_interval: report.busy_interval.map(|(a, b)| (sig(a), sig(b))),
        peak_utilization: sig(report.peak_utilization),
        deadline_met_fraction: sig(report.deadline_met_fraction),
        deadlines_met: report.met_count(),
        deadlines_missed: report.outcomes.len() - report.met_count(),
        misses: report
            .missed()
            .map(|o| Miss {
                job_id: &o.job_id,
                miss_by: sig(o.miss_by),
            })
            .collect(),
        end_time: sig(report.end_time),
        horizon_reached: report.horizon_reached,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes the run's artifacts into `dir` (created if missing).
pub fn emit_report(report: &RunReport, dir: &Path, options: EmitOptions) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), MetricsError> {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    put(
        "utilization.csv",
        csv_bytes(
            &[
                "time",
                "allocated_cpu_millicores",
                "capacity_cpu_millicores",
                "cpu_utilization",
                "allocated_memory_mb",
                "capacity_memory_mb",
            ],
            report.utilization.iter().map(|s| {
                vec![
                    fmt_sig(s.time),
                    s.allocated_cpu_millicores.to_string(),
                    s.capacity_cpu_millicores.to_string(),
                    fmt_sig(s.cpu_utilization()),
                    s.allocated_memory_mb.to_string(),
                    s.capacity_memory_mb.to_string(),
                ]
            }),
        ),
    )?;
    put(
        "cost_ledger.csv",
        csv_bytes(
            &["job_id", "step_id", "region", "rcost_per_second", "deploy_start", "deploy_end", "cost"],
            report.ledger.iter().map(|e| {
                vec![
                    e.job_id.clone(),
                    e.step_id.clone(),
                    e.region.to_string(),
                    fmt_sig(e.rcost_per_second),
                    fmt_sig(e.deploy_start),
                    fmt_sig(e.deploy_end),
                    fmt_sig(e.cost),
                ]
            }),
        ),
    )?;
    put(
        "job_outcomes.csv",
        csv_bytes(
            &["job_id", "template", "arrival", "completion", "duration", "deadline", "met", "miss_by"],
            report.outcomes.iter().map(|o| {
                vec![
                    o.job_id.clone(),
                    o.template.clone(),
                    fmt_sig(o.arrival),
                    opt(o.completion),
                    opt(o.duration),
                    fmt_sig(o.deadline),
                    o.met.to_string(),
                    fmt_sig(o.miss_by),
                ]
            }),
        ),
    )?;
    put(
        "arrivals.csv",
        csv_bytes(
            &["job_id", "template", "arrival_time"],
            report
                .arrivals
                .iter()
                .map(|a| vec![a.job_id.clone(), a.template.clone(), fmt_sig(a.time)]),
        ),
    )?;
    put("summary.json", summary_json(report).into_bytes())?;

    if options.plot_data {
        let bucket = if options.plot_bucket > 0.0 { options.plot_bucket } else { 30.0 };
        put(
            "plot_utilization.csv",
            csv_bytes(
                &["bucket_start", "mean_cpu_utilization"],
                downsample(&report.utilization, report.end_time, bucket)
                    .into_iter()
                    .map(|(t, u)| vec![fmt_sig(t), fmt_sig(u)]),
            ),
        )?;
        put(
            "plot_durations.csv",
            csv_bytes(
                &["job_id", "template", "duration", "deadline", "met"],
                report.outcomes.iter().map(|o| {
                    vec![
                        o.job_id.clone(),
                        o.template.clone(),
                        opt(o.duration),
                        fmt_sig(o.deadline),
                        o.met.to_string(),
                    ]
                }),
            ),
        )?;
    }
    Ok(written)
}

/// Mean utilization per fixed-width bucket from the first sample to `end`.
pub fn downsample(trace: &[UtilizationSample], end: f64, bucket: f64) -> Vec<(f64, f64)> {
    let Some(first) = trace.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut t = first.time;
    while t < end {
        let t1 = (t + bucket).min(end);
        if let Ok(u) = time_weighted_utilization(trace, t, t1) {
            out.push((t, u));
        }
        t += bucket;
    }
    out
}
