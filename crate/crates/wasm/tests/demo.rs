use hetplan_wasm::{plan_json, run_json, scenario_json, simulate_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn reference_job() -> String {
    parse(&scenario_json())["job"].to_string()
}

#[test]
fn scenario_exposes_catalog_and_job() {
    let s = parse(&scenario_json());
    assert_eq!(s["catalog"]["types"].as_array().unwrap().len(), 3);
    assert_eq!(s["job"]["B_global"], 1024);
    assert_eq!(s["job"]["candidate_types"][0], "p3.2xlarge");
}

#[test]
fn plan_then_simulate_agree() {
    let plan = parse(&plan_json(&reference_job(), 3).unwrap());
    assert_eq!(plan["status"], "feasible");
    assert_eq!(plan["describe"], "2xp3.2xlarge@512");

    let sim = parse(&simulate_json(&plan["plan"].to_string(), 3).unwrap());
    assert_eq!(sim["t_iter_mean"], plan["plan"]["predicted_t_iter"]);
    assert!((sim["hourly_price"].as_f64().unwrap() - 2.0 * 0.918).abs() < 1e-12);
}

#[test]
fn unreachable_batch_is_reported_not_raised() {
    let mut job = parse(&reference_job());
    job["B_global"] = 1000.into();
    let out = parse(&plan_json(&job.to_string(), 0).unwrap());
    assert_eq!(out["status"], "unsat");
}

#[test]
fn bad_input_names_the_document() {
    let err = simulate_json(r#"{"entries":[{"vm_type_id":"nope","count":1,"batch":8}]}"#, 0).unwrap_err();
    assert!(err.starts_with("plan:"));
    assert!(plan_json("{}", 0).unwrap_err().starts_with("job:"));
}

#[test]
fn preemption_triggers_one_replan() {
    let quiet = parse(&run_json(&reference_job(), None, None, 2).unwrap());
    assert_eq!(quiet["summary"]["replans"], 0);
    assert_eq!(quiet["summary"]["outcome"], "completed");

    let hit = parse(&run_json(&reference_job(), Some("p3.2xlarge"), Some(200), 2).unwrap());
    assert_eq!(hit["summary"]["replans"], 1);
    assert_eq!(hit["summary"]["preemptions"], 1);
    assert!(hit["report"].as_str().unwrap().contains("preemption"));
}
