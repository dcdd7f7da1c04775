use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetplan::runtime::closed_loop::{EventKind, EventLog};
use serde_json::Value;
use tempfile::TempDir;

fn hetplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = hetplan(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// Example files plus a fitted model and profile.
fn pipeline(seed: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["example", "--out", "."]);
    ok(
        d,
        &[
            "probe",
            "--catalog",
            "catalog.json",
            "--cloudspec",
            "cloudspec.json",
            "--seed",
            seed,
            "--out",
            "probes.csv",
        ],
    );
    ok(
        d,
        &[
            "fit-net",
            "--probes",
            "probes.csv",
            "--seed",
            seed,
            "--out",
            "model.json",
        ],
    );
    ok(
        d,
        &[
            "profile",
            "--catalog",
            "catalog.json",
            "--cloudspec",
            "cloudspec.json",
            "--seed",
            seed,
            "--out",
            "profile.json",
        ],
    );
    tmp
}

fn plan_args<'a>(job: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "plan",
        "--job",
        job,
        "--catalog",
        "catalog.json",
        "--profile",
        "profile.json",
        "--net-model",
        "model.json",
        "--seed",
        "4",
        "--out",
        out,
    ]
}

/// Lines after the version comment and the header.
fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count().saturating_sub(1)
}

fn write_grid(dir: &Path, sizes: &[f64]) -> PathBuf {
    let path = dir.join("grid.json");
    let grid = serde_json::json!({
        "sizes": sizes,
        "world_sizes": [2, 4, 8, 16, 32, 64],
        "allocations": 3,
        "concurrent_transfers": [1],
    });
    std::fs::write(&path, grid.to_string()).unwrap();
    path
}

#[test]
fn probe_grid_rows_multiply_out() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["example", "--out", "."]);
    let mut catalog: Value = serde_json::from_slice(&read(d, "catalog.json")).unwrap();
    catalog["types"].as_array_mut().unwrap().truncate(1);
    std::fs::write(d.join("one.json"), catalog.to_string()).unwrap();
    let sizes: Vec<f64> = (0..8).map(|i| 4f64.powi(i + 1)).collect();
    write_grid(d, &sizes);

    let out = ok(
        d,
        &[
            "probe",
            "--catalog",
            "one.json",
            "--cloudspec",
            "cloudspec.json",
            "--grid",
            "grid.json",
            "--out",
            "p.csv",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("144 rows"));
    let text = String::from_utf8(read(d, "p.csv")).unwrap();
    assert_eq!(data_rows(&text), 144);
    assert!(text.lines().nth(1).unwrap().starts_with("region,zone,device_kind,cpu_kind,rated_network_bps,buffer_bytes,world_size,concurrent_transfers,placement_group,time_s"));
}

#[test]
fn empty_grid_writes_empty_dataset_and_warns() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["example", "--out", "."]);
    write_grid(d, &[]);
    let out = ok(
        d,
        &[
            "probe",
            "--catalog",
            "catalog.json",
            "--cloudspec",
            "cloudspec.json",
            "--grid",
            "grid.json",
            "--out",
            "p.csv",
        ],
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"));
    assert!(stderr.contains("0 rows"));
    let text = String::from_utf8(read(d, "p.csv")).unwrap();
    assert_eq!(data_rows(&text), 0);
}

#[test]
fn fixed_seed_gives_byte_identical_artifacts() {
    let a = pipeline("9");
    let b = pipeline("9");
    for name in ["probes.csv", "model.json", "profile.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
    ok(a.path(), &plan_args("job.json", "plan.json"));
    ok(b.path(), &plan_args("job.json", "plan.json"));
    assert_eq!(read(a.path(), "plan.json"), read(b.path(), "plan.json"));

    let c = pipeline("10");
    assert_ne!(read(a.path(), "probes.csv"), read(c.path(), "probes.csv"));
}

#[test]
fn plan_and_simulate_the_reference_job() {
    let tmp = pipeline("4");
    let d = tmp.path();
    ok(d, &plan_args("job.json", "plan.json"));
    let plan: Value = serde_json::from_slice(&read(d, "plan.json")).unwrap();
    assert_eq!(plan["status"], "feasible");
    assert_eq!(plan["plan"]["entries"][0]["vm_type_id"], "p3.2xlarge");
    assert!(plan["stats"]["sims_executed"].as_u64().unwrap() > 0);

    let out = ok(
        d,
        &[
            "simulate",
            "--plan",
            "plan.json",
            "--job",
            "job.json",
            "--catalog",
            "catalog.json",
            "--profile",
            "profile.json",
            "--net-model",
            "model.json",
            "--seed",
            "4",
        ],
    );
    let sim: Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = sim["t_iter_mean"].as_f64().unwrap();
    assert_eq!(Some(t), plan["plan"]["predicted_t_iter"].as_f64());
}

#[test]
fn unreachable_batch_exits_with_unsat_code() {
    let tmp = pipeline("5");
    let d = tmp.path();
    let mut job: Value = serde_json::from_slice(&read(d, "job.json")).unwrap();
    job["B_global"] = 1000.into();
    std::fs::write(d.join("odd.json"), job.to_string()).unwrap();
    let out = hetplan(d, &plan_args("odd.json", "unsat.json"));
    assert_eq!(out.status.code(), Some(2));
    let body: Value = serde_json::from_slice(&read(d, "unsat.json")).unwrap();
    assert_eq!(body["status"], "unsat");
    assert!(body["reason"].as_str().unwrap().contains("batch"));
}

#[test]
fn bad_inputs_name_the_file_and_field() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["example", "--out", "."]);
    std::fs::write(d.join("bad.json"), r#"{"types":[{"id":"x"}]}"#).unwrap();
    let out = hetplan(d, &["probe", "--catalog", "bad.json", "--cloudspec", "cloudspec.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.json"));
    assert!(stderr.contains("device_kind"));
    assert!(!d.join("p.csv").exists());
}

#[test]
fn preempted_run_replans_once_and_reports() {
    let tmp = pipeline("6");
    let d = tmp.path();
    let run = [
        "run",
        "--job",
        "job.json",
        "--catalog",
        "catalog.json",
        "--profile",
        "profile.json",
        "--net-model",
        "model.json",
        "--cloudspec",
        "cloudspec-preempt.json",
        "--seed",
        "6",
        "--out",
        "log.jsonl",
    ];
    ok(d, &run);
    let log = EventLog::from_jsonl(&String::from_utf8(read(d, "log.jsonl")).unwrap()).unwrap();
    assert_eq!(log.replan_count(), 1);
    assert!(log.final_kind().unwrap().is_terminal());
    assert_eq!(log.final_kind(), Some(EventKind::Completed));

    let first = read(d, "log.jsonl");
    ok(d, &run);
    assert_eq!(first, read(d, "log.jsonl"));

    let out = ok(d, &["report", "--log", "log.jsonl"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("preemption"));
    assert!(text.contains("replans      1"));
}

#[test]
fn report_on_empty_log_is_an_empty_summary() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let out = ok(d, &["report", "--log", "empty.jsonl", "--json"]);
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["events"], 0);
    assert_eq!(s["replans"], 0);
    assert!(s["outcome"].is_null());
}
