use hetplan::cloudsim::{grid_probe, profile_workload, ProbeGrid};
use hetplan::netmodel::{build_dataset, read_probes_csv, train_model, write_probes_csv, BandwidthModel, TrainConfig};
use hetplan::optimizer::{solve, SolverConfig};
use hetplan::runtime::closed_loop::{render_report, run_closed_loop, summarize, EventKind, EventLog, LoopConfig};
use hetplan::scenario;
use hetplan::simulator::{Selection, Simulator};
use hetplan::types::{ModelProfile, Plan};
use hetplan::validate::validate_plan;

fn trained(seed: u64) -> (BandwidthModel, ModelProfile) {
    let spec = scenario::cloud_spec();
    let catalog = scenario::catalog();
    let probes = grid_probe(&spec, &catalog.types, &ProbeGrid::default(), seed).unwrap();
    let model = train_model(&build_dataset(&probes).records, &TrainConfig::default()).unwrap();
    let profile = profile_workload(&spec, &catalog.types, 5, Some(4), seed).unwrap();
    (model, profile)
}

#[test]
fn artifacts_round_trip_without_changing_predictions() {
    let spec = scenario::cloud_spec();
    let catalog = scenario::catalog();
    let probes = grid_probe(&spec, &catalog.types, &ProbeGrid::default(), 3).unwrap();
    assert_eq!(probes.len(), 14 * 6 * 3 * catalog.types.len());

    let mut csv = Vec::new();
    write_probes_csv(&mut csv, &probes).unwrap();
    let reread = read_probes_csv(csv.as_slice()).unwrap();
    assert_eq!(reread, probes);

    let model = train_model(&build_dataset(&reread).records, &TrainConfig::default()).unwrap();
    let text = serde_json::to_string(&model).unwrap();
    let back: BandwidthModel = serde_json::from_str(&text).unwrap();
    for (f, _) in probes.iter().step_by(17) {
        assert_eq!(model.predict_bus_bw(f).unwrap(), back.predict_bus_bw(f).unwrap());
    }

    let profile = profile_workload(&spec, &catalog.types, 5, Some(4), 3).unwrap();
    let back: ModelProfile = serde_json::from_str(&serde_json::to_string(&profile).unwrap()).unwrap();
    assert_eq!(back, profile);
}

#[test]
fn reference_job_gets_a_valid_plan() {
    let (model, profile) = trained(11);
    let job = scenario::preemption_job(&scenario::catalog());
    let sim = Simulator::new(&profile, &model, 11);
    let solution = solve(&job, &profile, &sim, &SolverConfig::default()).unwrap();
    assert!(validate_plan(&solution.plan, &job).unwrap().is_empty());
    assert_eq!(solution.plan.describe(), "2xp3.2xlarge@512");
    assert!(solution.stats.sims_executed >= 2);

    let selection = Selection::from_plan(&solution.plan, &job).unwrap();
    let again = sim.run(&selection).unwrap();
    assert_eq!(Some(again.t_iter_mean), solution.plan.predicted_t_iter);
}

#[test]
fn quiet_run_completes_without_switching() {
    let (model, profile) = trained(12);
    let catalog = scenario::catalog();
    let job = scenario::preemption_job(&catalog);
    let spec = scenario::cloud_spec();
    let sim = Simulator::new(&profile, &model, 12);
    let planner = |j: &_| solve(j, &profile, &sim, &SolverConfig::default()).map(|s| s.plan);
    let log = run_closed_loop(
        &job,
        &spec,
        &spec.true_profile(&catalog.types),
        planner,
        &LoopConfig::default(),
    )
    .unwrap();
    assert_eq!(log.final_kind(), Some(EventKind::Completed));
    assert_eq!(log.replan_count(), 0);
    let summary = summarize(&log);
    assert_eq!(summary.iterations_done, job.iterations);
    assert!(summary.spent > 0.0);

    let reread = EventLog::from_jsonl(&log.to_jsonl()).unwrap();
    assert_eq!(reread, log);
    let report = render_report(&reread);
    assert!(report.contains("completed"));
    assert!(report.contains("2xp3.2xlarge@512"));
}

#[test]
fn preempted_run_switches_once_and_bills_the_switch() {
    let (model, profile) = trained(13);
    let catalog = scenario::catalog();
    let job = scenario::preemption_job(&catalog);
    let spec = scenario::preemption_spec();
    let sim = Simulator::new(&profile, &model, 13);
    let planner = |j: &_| solve(j, &profile, &sim, &SolverConfig::default()).map(|s| s.plan);
    let log = run_closed_loop(
        &job,
        &spec,
        &spec.true_profile(&catalog.types),
        planner,
        &LoopConfig::default(),
    )
    .unwrap();
    assert_eq!(log.replan_count(), 1);
    let kinds: Vec<EventKind> = log.events.iter().map(|e| e.kind).collect();
    let pre = kinds.iter().position(|k| *k == EventKind::Preemption).unwrap();
    assert_eq!(kinds[pre + 1], EventKind::Decision);
    assert_eq!(kinds[pre + 2], EventKind::Launch);
    // the switch costs exactly launch + detach of wall time
    let gap = log.events[pre + 2].timestamp - log.events[pre + 1].timestamp;
    assert!((gap - 155.0).abs() < 1e-9);
    let launched: Plan = serde_json::from_value(log.events[pre + 2].payload["plan"].clone()).unwrap();
    assert_eq!(launched.describe(), "1xp3.2xlarge@512 + 8xg3.4xlarge@64");
    assert_eq!(log.final_kind(), Some(EventKind::Completed));
}
