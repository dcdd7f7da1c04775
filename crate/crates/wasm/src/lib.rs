//! Browser bindings over the reference scenario. Every entry point takes and
//! returns JSON strings; the `*_json` functions are the native-testable core.

use std::cell::OnceCell;

use serde_json::json;
use wasm_bindgen::prelude::*;

use hetplan::cloudsim::{grid_probe, profile_workload, PreemptionEvent, ProbeGrid};
use hetplan::netmodel::{build_dataset, train_model, BandwidthModel, TrainConfig};
use hetplan::optimizer::{solve, SolveError, SolverConfig};
use hetplan::runtime::closed_loop::{render_report, run_closed_loop, summarize, LoopConfig};
use hetplan::scenario;
use hetplan::seed;
use hetplan::simulator::{Selection, Simulator};
use hetplan::types::{Catalog, ModelProfile, Plan, TrainJob, TrainJobFile};

const DEMO_SEED: u64 = 1;

struct Demo {
    catalog: Catalog,
    profile: ModelProfile,
    model: BandwidthModel,
}

impl Demo {
    fn build() -> Result<Self, String> {
        let catalog = scenario::catalog();
        let spec = scenario::cloud_spec();
        let probes = grid_probe(
            &spec,
            &catalog.types,
            &ProbeGrid::default(),
            seed::derive(DEMO_SEED, "probe"),
        )
        .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            seed: seed::derive(DEMO_SEED, "net-train"),
            ..TrainConfig::default()
        };
        let model = train_model(&build_dataset(&probes).records, &config).map_err(|e| e.to_string())?;
        let profile = profile_workload(&spec, &catalog.types, 5, Some(4), seed::derive(DEMO_SEED, "profile"))
            .map_err(|e| e.to_string())?;
        Ok(Self {
            catalog,
            profile,
            model,
        })
    }

    fn job(&self, job_json: &str) -> Result<TrainJob, String> {
        let file: TrainJobFile = serde_json::from_str(job_json).map_err(|e| format!("job: {e}"))?;
        file.resolve(Some(&self.catalog)).map_err(|e| format!("job: {e}"))
    }
}

thread_local! {
    static DEMO: OnceCell<Result<Demo, String>> = const { OnceCell::new() };
}

fn with_demo<T>(f: impl FnOnce(&Demo) -> Result<T, String>) -> Result<T, String> {
    DEMO.with(|cell| match cell.get_or_init(Demo::build) {
        Ok(demo) => f(demo),
        Err(e) => Err(e.clone()),
    })
}

/// The reference catalog and job, as starting points for the page.
pub fn scenario_json() -> String {
    let catalog = scenario::catalog();
    let job = scenario::preemption_job(&catalog);
    let mut file = TrainJobFile::from(&job);
    file.candidate_types = job
        .candidate_types
        .iter()
        .map(|t| hetplan::types::TypeRef::Id(t.id.clone()))
        .collect();
    json!({ "catalog": catalog, "job": file }).to_string()
}

/// Solves a job whose candidate types name catalog ids.
pub fn plan_json(job_json: &str, seed_value: u64) -> Result<String, String> {
    with_demo(|demo| {
        let job = demo.job(job_json)?;
        let sim = Simulator::new(&demo.profile, &demo.model, seed::derive(seed_value, "sim"));
        let out = match solve(&job, &demo.profile, &sim, &SolverConfig::default()) {
            Ok(s) => json!({
                "status": "feasible",
                "describe": s.plan.describe(),
                "plan": s.plan,
                "stats": s.stats,
            }),
            Err(SolveError::Unsat {
                reason,
                best_infeasible,
                stats,
            }) => json!({ "status": "unsat", "reason": reason, "best_infeasible": best_infeasible, "stats": stats }),
            Err(e) => return Err(e.to_string()),
        };
        Ok(out.to_string())
    })
}

/// Predicts iteration latency for `{"entries": [{vm_type_id, count, batch}]}`.
pub fn simulate_json(plan_json: &str, seed_value: u64) -> Result<String, String> {
    with_demo(|demo| {
        let plan: Plan = serde_json::from_str(plan_json).map_err(|e| format!("plan: {e}"))?;
        let job = TrainJob {
            profile: demo.profile.model_id.clone(),
            global_batch: plan.global_batch(),
            iterations: 1,
            time_limit: None,
            budget: None,
            objective: hetplan::types::Objective::MinTime,
            candidate_types: demo.catalog.types.clone(),
        };
        let selection = Selection::from_plan(&plan, &job).map_err(|e| format!("plan: {e}"))?;
        let sim = Simulator::new(&demo.profile, &demo.model, seed::derive(seed_value, "sim"));
        let r = sim.run(&selection).map_err(|e| e.to_string())?;
        let hourly = plan.hourly_price(&demo.catalog.types);
        let value = json!({
            "t_iter_mean": r.t_iter_mean,
            "t_fw_mean": r.t_fw_mean,
            "t_bw_mean": r.t_bw_mean,
            "t_pe": r.t_pe,
            "samples_per_second": plan.global_batch() as f64 / r.t_iter_mean,
            "hourly_price": hourly,
            "per_iteration_latencies": r.per_iteration_latencies,
        });
        Ok(value.to_string())
    })
}

/// Runs the job on the synthetic cloud, cancelling one `preempt_type`
/// instance after `preempt_at` iterations when given.
pub fn run_json(
    job_json: &str,
    preempt_type: Option<&str>,
    preempt_at: Option<u64>,
    seed_value: u64,
) -> Result<String, String> {
    with_demo(|demo| {
        let job = demo.job(job_json)?;
        let mut spec = scenario::cloud_spec();
        if let (Some(type_id), Some(at)) = (preempt_type, preempt_at) {
            spec.preemptions.push(PreemptionEvent {
                time: 0.0,
                at_iteration: Some(at),
                type_id: type_id.to_string(),
                count: 1,
            });
        }
        let truth = spec.true_profile(&demo.catalog.types);
        let sim = Simulator::new(&demo.profile, &demo.model, seed::derive(seed_value, "sim"));
        let planner = |j: &TrainJob| solve(j, &demo.profile, &sim, &SolverConfig::default()).map(|s| s.plan);
        let config = LoopConfig {
            seed: seed::derive(seed_value, "run"),
            ..LoopConfig::default()
        };
        let log = run_closed_loop(&job, &spec, &truth, planner, &config).map_err(|e| e.to_string())?;
        Ok(json!({
            "report": render_report(&log),
            "summary": summarize(&log),
            "events": log.events,
        })
        .to_string())
    })
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scenario() -> String {
    scenario_json()
}

#[wasm_bindgen]
pub fn plan(job_json: &str, seed: u32) -> Result<String, JsError> {
    js(plan_json(job_json, seed as u64))
}

#[wasm_bindgen]
pub fn simulate(plan_json: &str, seed: u32) -> Result<String, JsError> {
    js(simulate_json(plan_json, seed as u64))
}

/// `preempt_at` below zero disables the scripted preemption.
#[wasm_bindgen]
pub fn run(job_json: &str, preempt_type: &str, preempt_at: i32, seed: u32) -> Result<String, JsError> {
    let at = u64::try_from(preempt_at).ok();
    js(run_json(
        job_json,
        Some(preempt_type).filter(|t| !t.is_empty()),
        at,
        seed as u64,
    ))
}
