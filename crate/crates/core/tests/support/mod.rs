#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use hcs_sim::config::load_scenario;
use hcs_sim::model::PipelineDag;
use hcs_sim::sim::Scenario;

use oracle::OracleStep;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load(name: &str) -> Scenario {
    load_scenario(&scenario_path(name))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
        .to_scenario()
}

/// Converts a DAG to oracle steps with service times in ticks of
/// `1 / ticks_per_second`, panicking if a stretched service time is not a
/// whole number of ticks.
pub fn oracle_steps(dag: &PipelineDag, speed_factor: f64, ticks_per_second: f64) -> (Vec<OracleStep>, Vec<(usize, usize)>) {
    let steps = dag
        .steps
        .iter()
        .map(|s| {
            let ticks = s.service_time_per_fragment / speed_factor * ticks_per_second;
            let whole = ticks.round();
            assert!((ticks - whole).abs() < 1e-9, "step {} is {ticks} ticks", s.step_id);
            OracleStep {
                service: whole as u64,
                workers: s.replicas as usize,
                feed_forward: s.feed_forward,
            }
        })
        .collect();
    let edges = dag
        .edges
        .iter()
        .map(|(a, b)| (dag.index_of(a).unwrap(), dag.index_of(b).unwrap()))
        .collect();
    (steps, edges)
}
