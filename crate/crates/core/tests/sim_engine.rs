mod support;

use proptest::prelude::*;

use hcs_sim::metrics::Region;
use hcs_sim::model::{rcost, CostParams, PipelineDag, ResourceVector, StepSpec};
use hcs_sim::placement::PlacementPolicy;
use hcs_sim::scheduler::{SchedulerConfig, SchedulingMode};
use hcs_sim::sim::{run, simulate, ArrivalProcess, CloudRegion, EdgeCluster, ExplicitArrival, Fault, JobTemplate, Scenario, SimError, SimOptions};

use support::oracle::pipeline_makespan_ticks;
use support::oracle_steps;

fn scenario(nodes: usize, templates: Vec<JobTemplate>, arrivals: &[(f64, &str)]) -> Scenario {
    Scenario {
        name: "test".into(),
        edge: EdgeCluster {
            nodes,
            capacity: ResourceVector::new(2000, 4096),
            speed_factor: 0.8,
        },
        cloud: CloudRegion {
            speed_factor: 1.0,
            concurrency: None,
        },
        scheduler: SchedulerConfig::default(),
        execution_timeout: 60.0,
        horizon: None,
        templates,
        arrivals: ArrivalProcess::Explicit(
            arrivals
                .iter()
                .map(|(t, name)| ExplicitArrival {
                    time: *t,
                    template: Some(name.to_string()),
                    job_id: None,
                })
                .collect(),
        ),
        faults: vec![],
    }
}

fn template(name: &str, steps: Vec<StepSpec>, fragments: u32) -> JobTemplate {
    JobTemplate {
        name: name.into(),
        dag: PipelineDag::chain(steps),
        fragment_count: fragments,
        deadline: 1000.0,
    }
}

fn small(name: &str, cpu: u64) -> JobTemplate {
    template(name, vec![StepSpec::new("s", ResourceVector::new(cpu, 512), 1, 2.0)], 4)
}

#[test]
fn zero_jobs() {
    let r = run(&scenario(2, vec![small("t", 500)], &[])).unwrap();
    assert!(r.outcomes.is_empty());
    assert_eq!(r.total_cost, 0.0);
    assert_eq!(r.deadline_met_fraction, 0.0);
    assert_eq!(r.mean_utilization, None);
}

#[test]
fn single_job_on_empty_edge_runs_free_at_edge_speed() {
    let r = run(&scenario(1, vec![small("t", 500)], &[(10.0, "t")])).unwrap();
    let o = &r.outcomes[0];
    // Deployed at the first round boundary, then 4 fragments of 2 s / 0.8.
    assert_eq!(o.completion, Some(40.0));
    assert_eq!(o.duration, Some(30.0));
    assert!(o.met);
    assert_eq!(r.total_cost, 0.0);
    assert_eq!(r.ledger.len(), 1);
    assert_eq!(r.ledger[0].region, Region::Edge);
}

#[test]
fn cloud_only_cost_is_rcost_times_deployed_time() {
    let t = small("t", 500);
    let step = t.dag.steps[0].clone();
    let r = run(&scenario(1, vec![t], &[(10.0, "t")]).cloud_only()).unwrap();
    assert_eq!(r.outcomes[0].completion, Some(38.0));
    let want = rcost(&step, &CostParams::default()) * 8.0;
    assert!((r.total_cost - want).abs() < 1e-9);
}

#[test]
fn step_too_big_for_edge_goes_to_cloud() {
    let r = run(&scenario(2, vec![small("t", 3000)], &[(0.0, "t")])).unwrap();
    assert_eq!(r.ledger[0].region, Region::Cloud);
    assert_eq!(r.outcomes[0].completion, Some(8.0));
}

#[test]
fn expensive_newcomer_evicts_cheaper_resident() {
    let cheap = template("cheap", vec![StepSpec::new("s", ResourceVector::new(1500, 512), 1, 2.0)], 100);
    let dear = template("dear", vec![StepSpec::new("s", ResourceVector::new(2000, 2048), 1, 2.0)], 10);
    let s = scenario(1, vec![cheap, dear], &[(0.0, "cheap"), (31.0, "dear")]);
    let sim = simulate(&s, SimOptions { check_invariants: true }).unwrap();
    let r = &sim.report;
    assert!(r.outcomes.iter().all(|o| o.completion.is_some()));
    let regions = |job: &str| -> Vec<Region> { r.ledger.iter().filter(|e| e.job_id == job).map(|e| e.region).collect() };
    // The victim keeps the edge through the grace period, then moves.
    assert_eq!(regions("cheap-0"), vec![Region::Edge, Region::Cloud]);
    assert_eq!(regions("dear-1"), vec![Region::Edge]);
    let moved = r.ledger.iter().find(|e| e.job_id == "cheap-0" && e.region == Region::Cloud).unwrap();
    assert_eq!(moved.deploy_start, 90.0);
    let newcomer = r.ledger.iter().find(|e| e.job_id == "dear-1").unwrap();
    assert_eq!(newcomer.deploy_start, 90.0);
    for per_fragment in sim.completions.values() {
        assert!(per_fragment.values().all(|&n| n == 1));
    }
}

#[test]
fn idle_node_failure_changes_nothing() {
    let s = scenario(2, vec![small("t", 500)], &[(0.0, "t")]);
    let clean = run(&s).unwrap();
    let mut faulty = s.clone();
    faulty.faults.push(Fault::NodeFailure { time: 5.0, node: 1 });
    let r = run(&faulty).unwrap();
    assert_eq!(r.outcomes, clean.outcomes);
    assert_eq!(r.total_cost, 0.0);
}

#[test]
fn failure_of_busy_node_moves_work() {
    let s = scenario(2, vec![small("t", 500)], &[(0.0, "t")]);
    let mut faulty = s.clone();
    faulty.faults.push(Fault::NodeFailure { time: 4.0, node: 0 });
    let sim = simulate(&faulty, SimOptions { check_invariants: true }).unwrap();
    assert!(sim.report.outcomes[0].completion.unwrap() > 10.0);
    for per_fragment in sim.completions.values() {
        assert_eq!(per_fragment.len(), 4);
        assert!(per_fragment.values().all(|&n| n == 1));
    }
}

#[test]
fn restart_after_completion_is_a_no_op() {
    let s = scenario(1, vec![small("t", 500)], &[(0.0, "t")]);
    let clean = simulate(&s, SimOptions::default()).unwrap();
    let mut restarted = s.clone();
    restarted.faults.push(Fault::DriverRestart {
        time: 100.0,
        job_id: "t-0".into(),
    });
    let r = simulate(&restarted, SimOptions::default()).unwrap();
    assert_eq!(r.report.outcomes, clean.report.outcomes);
    assert_eq!(r.completions, clean.completions);
}

#[test]
fn restart_mid_run_loses_nothing() {
    let t = template("t", vec![StepSpec::new("a", ResourceVector::new(500, 512), 2, 2.0), StepSpec::new("b", ResourceVector::new(500, 512), 1, 1.0)], 20);
    let mut s = scenario(1, vec![t], &[(0.0, "t")]);
    s.faults.push(Fault::DriverRestart {
        time: 7.0,
        job_id: "t-0".into(),
    });
    let sim = simulate(&s, SimOptions { check_invariants: true }).unwrap();
    assert!(sim.report.outcomes[0].completion.is_some());
    for per_fragment in sim.completions.values() {
        assert_eq!(per_fragment.len(), 20);
        assert!(per_fragment.values().all(|&n| n == 1));
    }
}

#[test]
fn horizon_cuts_the_run_short() {
    let mut s = scenario(1, vec![small("t", 500)], &[(0.0, "t")]);
    s.horizon = Some(5.0);
    let r = run(&s).unwrap();
    assert!(r.horizon_reached);
    assert_eq!(r.end_time, 5.0);
    assert_eq!(r.outcomes[0].completion, None);
    assert!(!r.outcomes[0].met);
}

#[test]
fn unknown_fault_job_is_rejected() {
    let mut s = scenario(1, vec![small("t", 500)], &[(0.0, "t")]);
    s.faults.push(Fault::DriverRestart {
        time: 1.0,
        job_id: "nope".into(),
    });
    assert!(matches!(run(&s), Err(SimError::UnknownFaultJob(_))));
}

#[test]
fn service_time_over_timeout_is_rejected() {
    let t = template("t", vec![StepSpec::new("s", ResourceVector::new(500, 512), 1, 50.0)], 1);
    // 50 s at edge speed 0.8 is 62.5 s.
    assert!(matches!(run(&scenario(1, vec![t], &[(0.0, "t")])), Err(SimError::InvalidJob { .. })));
}

#[test]
fn single_job_matches_oracle_makespan_at_edge_speed() {
    let dag = PipelineDag::chain(vec![
        StepSpec::new("a", ResourceVector::new(250, 256), 2, 1.6),
        StepSpec::new("b", ResourceVector::new(250, 256), 1, 0.8),
        StepSpec::new("c", ResourceVector::new(250, 256), 3, 2.4).with_feed_forward(false),
    ]);
    let t = JobTemplate {
        name: "t".into(),
        dag: dag.clone(),
        fragment_count: 17,
        deadline: 1000.0,
    };
    let r = run(&scenario(1, vec![t], &[(0.0, "t")])).unwrap();
    let (steps, edges) = oracle_steps(&dag, 0.8, 1.0);
    let want = pipeline_makespan_ticks(&steps, &edges, 17) as f64;
    assert!((r.outcomes[0].duration.unwrap() - want).abs() < 1e-9);
}

#[test]
fn placement_policies_all_finish_the_same_jobs() {
    let templates = vec![small("a", 500), small("b", 1200), small("c", 1800)];
    let arrivals: Vec<(f64, &str)> = (0..30).map(|i| (i as f64 * 7.0, ["a", "b", "c"][i % 3])).collect();
    for p in PlacementPolicy::ALL {
        let mut s = scenario(3, templates.clone(), &arrivals);
        s.scheduler.placement = p;
        let sim = simulate(&s, SimOptions { check_invariants: true }).unwrap();
        assert_eq!(sim.report.outcomes.len(), 30);
        assert!(sim.report.outcomes.iter().all(|o| o.completion.is_some()), "{p:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_runs_complete_every_fragment_once(
        cpus in prop::collection::vec(1u64..8, 1..4),
        replicas in 1u32..3,
        fragments in 1u32..12,
        gaps in prop::collection::vec(0.0f64..40.0, 1..12),
        nodes in 1usize..4,
        policy in 0usize..4,
        mode_cloud in any::<bool>(),
        fail in prop::option::of((0.0f64..200.0, 0usize..3)),
    ) {
        let templates: Vec<JobTemplate> = cpus
            .iter()
            .enumerate()
            .map(|(i, c)| template(&format!("t{i}"), vec![
                StepSpec::new("x", ResourceVector::new(c * 250, 256), replicas, 1.0),
                StepSpec::new("y", ResourceVector::new(250, 512), 1, 0.5).with_feed_forward(i % 2 == 0),
            ], fragments))
            .collect();
        let names: Vec<String> = templates.iter().map(|t| t.name.clone()).collect();
        let mut t = 0.0;
        let arrivals: Vec<(f64, &str)> = gaps
            .iter()
            .enumerate()
            .map(|(i, g)| {
                t += g;
                (t, names[i % names.len()].as_str())
            })
            .collect();
        let mut s = scenario(nodes, templates, &arrivals);
        s.scheduler.placement = PlacementPolicy::ALL[policy];
        if mode_cloud {
            s.scheduler.mode = SchedulingMode::CloudOnly;
        }
        if let Some((time, node)) = fail {
            if node < nodes {
                s.faults.push(Fault::NodeFailure { time, node });
            }
        }
        let sim = simulate(&s, SimOptions { check_invariants: true }).unwrap();
        prop_assert!(sim.report.outcomes.iter().all(|o| o.completion.is_some()));
        prop_assert_eq!(sim.completions.len(), arrivals.len() * 2);
        for per_fragment in sim.completions.values() {
            prop_assert_eq!(per_fragment.len(), fragments as usize);
            prop_assert!(per_fragment.values().all(|&n| n == 1));
        }
        prop_assert!(sim.report.total_cost >= 0.0);
    }
}
