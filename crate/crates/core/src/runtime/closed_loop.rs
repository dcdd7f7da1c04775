//! Plan, execute on the synthetic cloud, monitor and replan, recording every
//! step in a JSON-lines event log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{check_and_replan, on_preemption, Action, ProgressState, ReplanConfig, SwitchDecision};
use crate::cloudsim::{allocate, Allocation, CloudError, CloudSpec};
use crate::optimizer::SolveError;
use crate::seed;
use crate::types::{ModelProfile, Plan, TrainJob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Plan,
    Launch,
    Progress,
    Preemption,
    Decision,
    Completed,
    Unsat,
    BudgetExhausted,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            EventKind::Completed | EventKind::Unsat | EventKind::BudgetExhausted
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: f64,
    pub kind: EventKind,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, timestamp: f64, kind: EventKind, payload: Value) {
        self.events.push(Event {
            timestamp,
            kind,
            payload,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut log = EventLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            log.events
                .push(serde_json::from_str(line).map_err(|source| LogError::Parse { line: i + 1, source })?);
        }
        Ok(log)
    }

    pub fn decisions(&self) -> impl Iterator<Item = SwitchDecision> + '_ {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Decision)
            .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
    }

    pub fn replan_count(&self) -> usize {
        self.decisions().filter(SwitchDecision::is_replan).count()
    }

    pub fn final_kind(&self) -> Option<EventKind> {
        self.events.last().map(|e| e.kind)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Solve(SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub replan: ReplanConfig,
    /// Iterations between throughput checks.
    pub check_every: u64,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            replan: ReplanConfig::default(),
            check_every: 10,
            seed: 0,
        }
    }
}

struct Execution<'a> {
    job: &'a TrainJob,
    spec: &'a CloudSpec,
    profile: &'a ModelProfile,
    config: &'a LoopConfig,
    state: ProgressState,
    alloc: Allocation,
    batches: Vec<u64>,
    switches: u64,
    log: EventLog,
}

fn launch(spec: &CloudSpec, plan: &Plan, seed_value: u64) -> Result<(Allocation, Vec<u64>), CloudError> {
    let request: BTreeMap<String, u32> = plan.entries.iter().map(|e| (e.vm_type_id.clone(), e.count)).collect();
    let alloc = allocate(spec, &request, seed_value)?;
    let batch_of: BTreeMap<&str, u64> = plan.entries.iter().map(|e| (e.vm_type_id.as_str(), e.batch)).collect();
    let batches = alloc.instances.iter().map(|i| batch_of[i.type_id.as_str()]).collect();
    Ok((alloc, batches))
}

impl Execution<'_> {
    fn snapshot(&self) -> Value {
        json!({
            "iterations_done": self.state.iterations_done,
            "elapsed": self.state.elapsed,
            "spent": self.state.spent,
        })
    }

    /// Pays for `seconds` of the active plan without making progress.
    fn idle(&mut self, seconds: f64) {
        self.state.elapsed += seconds;
        self.state.spent += self.state.burn_rate(&self.job.candidate_types) * seconds;
    }

    /// Pays detach plus launch overhead at the current plan's rate, then
    /// draws a fresh allocation for `plan`.
    fn switch_to(&mut self, plan: Plan) -> Result<(), CloudError> {
        self.switches += 1;
        self.idle(self.config.replan.switch_overhead());
        self.state.active_plan = plan;
        self.state.window.clear();
        let (alloc, batches) = launch(
            self.spec,
            &self.state.active_plan,
            seed::derive(self.config.seed, &format!("run/{}", self.switches)),
        )?;
        self.alloc = alloc;
        self.batches = batches;
        self.log.push(
            self.state.elapsed,
            EventKind::Launch,
            json!({ "plan": self.state.active_plan, "overhead_s": self.config.replan.switch_overhead() }),
        );
        Ok(())
    }

    /// Logs the decision and applies it. Returns false when the run ends.
    fn apply(&mut self, decision: SwitchDecision) -> Result<bool, CloudError> {
        let action = decision.action.clone();
        self.log.push(
            self.state.elapsed,
            EventKind::Decision,
            serde_json::to_value(&decision).expect("decision serializes"),
        );
        match action {
            Action::Keep => Ok(true),
            Action::Replan(plan) => {
                self.switch_to(plan)?;
                Ok(true)
            }
            Action::Unsat => {
                let payload = json!({ "reason": decision.reason, "progress": self.snapshot() });
                self.log.push(self.state.elapsed, EventKind::Unsat, payload);
                Ok(false)
            }
        }
    }
}

/// Drives `job` to completion on the synthetic cloud. `planner` answers both
/// the initial request and every residual job. The log always ends with a
/// `completed`, `unsat` or `budget_exhausted` event.
pub fn run_closed_loop<F>(
    job: &TrainJob,
    spec: &CloudSpec,
    profile: &ModelProfile,
    planner: F,
    config: &LoopConfig,
) -> Result<EventLog, RunError>
where
    F: Fn(&TrainJob) -> Result<Plan, SolveError>,
{
    let mut log = EventLog::default();
    let plan = match planner(job) {
        Ok(p) => p,
        Err(e) if e.is_unsat() => {
            log.push(0.0, EventKind::Unsat, json!({ "reason": e.to_string() }));
            return Ok(log);
        }
        Err(e) => return Err(RunError::Solve(e)),
    };
    log.push(0.0, EventKind::Plan, json!({ "plan": plan }));
    let (alloc, batches) = launch(spec, &plan, seed::derive(config.seed, "run/0"))?;
    let mut ex = Execution {
        job,
        spec,
        profile,
        config,
        state: ProgressState::new(plan, &config.replan),
        alloc,
        batches,
        switches: 0,
        log,
    };
    ex.idle(config.replan.launch_overhead);
    ex.log.push(
        ex.state.elapsed,
        EventKind::Launch,
        json!({ "plan": ex.state.active_plan, "overhead_s": config.replan.launch_overhead }),
    );

    let mut fired = vec![false; spec.preemptions.len()];
    while ex.state.iterations_done < job.iterations {
        if let Some(i) = (0..fired.len())
            .find(|&i| !fired[i] && spec.preemptions[i].is_due(ex.state.elapsed, ex.state.iterations_done))
        {
            fired[i] = true;
            let p = &spec.preemptions[i];
            ex.log.push(
                ex.state.elapsed,
                EventKind::Preemption,
                json!({ "type_id": p.type_id, "count": p.count }),
            );
            let decision = on_preemption(&mut ex.state, &p.type_id, p.count, job, &planner, &config.replan);
            if !ex.apply(decision)? {
                return Ok(ex.log);
            }
            continue;
        }

        let mut chunk = config.check_every.max(1).min(job.iterations - ex.state.iterations_done);
        for (i, p) in spec.preemptions.iter().enumerate() {
            if let Some(at) = p.at_iteration.filter(|_| !fired[i]) {
                if at > ex.state.iterations_done {
                    chunk = chunk.min(at - ex.state.iterations_done);
                }
            }
        }
        let latencies = ex.alloc.run_iterations(spec, ex.profile, &ex.batches, chunk as u32)?;
        let burn = ex.state.burn_rate(&job.candidate_types);
        for l in latencies {
            ex.state.elapsed += l;
            ex.state.spent += burn * l;
            ex.state.iterations_done += 1;
            ex.state.window.push(ex.state.elapsed, 1.0 / l);
        }
        ex.log.push(ex.state.elapsed, EventKind::Progress, ex.snapshot());
        if job.budget.is_some_and(|b| ex.state.spent > b) {
            let payload = ex.snapshot();
            ex.log.push(ex.state.elapsed, EventKind::BudgetExhausted, payload);
            return Ok(ex.log);
        }
        if ex.state.iterations_done < job.iterations {
            let decision = check_and_replan(&ex.state, job, &planner, &config.replan);
            if !ex.apply(decision)? {
                return Ok(ex.log);
            }
        }
    }
    let payload = ex.snapshot();
    ex.log.push(ex.state.elapsed, EventKind::Completed, payload);
    Ok(ex.log)
}

/// Aggregates of a finished or partial run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub events: usize,
    pub outcome: Option<EventKind>,
    pub iterations_done: u64,
    pub elapsed: f64,
    pub spent: f64,
    pub preemptions: usize,
    pub replans: usize,
    pub plans: Vec<String>,
}

pub fn summarize(log: &EventLog) -> RunSummary {
    let mut s = RunSummary {
        events: log.events.len(),
        outcome: log.events.iter().rev().map(|e| e.kind).find(|k| k.is_terminal()),
        replans: log.replan_count(),
        ..RunSummary::default()
    };
    for e in &log.events {
        s.elapsed = s.elapsed.max(e.timestamp);
        if let Some(n) = e.payload.get("iterations_done").and_then(Value::as_u64) {
            s.iterations_done = n;
        }
        if let Some(c) = e.payload.get("spent").and_then(Value::as_f64) {
            s.spent = c;
        }
        match e.kind {
            EventKind::Preemption => s.preemptions += 1,
            EventKind::Launch => {
                if let Ok(p) = serde_json::from_value::<Plan>(e.payload["plan"].clone()) {
                    s.plans.push(p.describe());
                }
            }
            _ => {}
        }
    }
    s
}

/// Text timeline of notable events followed by a summary table.
pub fn render_report(log: &EventLog) -> String {
    let s = summarize(log);
    let mut out = String::new();
    let _ = writeln!(out, "timeline");
    for e in &log.events {
        let detail = match e.kind {
            EventKind::Progress => continue,
            EventKind::Plan | EventKind::Launch => serde_json::from_value::<Plan>(e.payload["plan"].clone())
                .map(|p| p.describe())
                .unwrap_or_default(),
            EventKind::Preemption => format!(
                "{} x{}",
                e.payload["type_id"].as_str().unwrap_or("?"),
                e.payload["count"].as_u64().unwrap_or(0)
            ),
            EventKind::Decision => {
                let action = e.payload["action"].as_str().unwrap_or("?");
                if action == "keep" {
                    continue;
                }
                format!("{action}: {}", e.payload["reason"].as_str().unwrap_or(""))
            }
            _ => e
                .payload
                .get("reason")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string(),
        };
        let kind = serde_json::to_value(e.kind).expect("kind serializes");
        let _ = writeln!(
            out,
            "  {:>9.1}s  {:<16} {}",
            e.timestamp,
            kind.as_str().unwrap_or(""),
            detail
        );
    }
    let _ = writeln!(out, "summary");
    let outcome = s
        .outcome
        .map(|k| {
            serde_json::to_value(k)
                .expect("kind serializes")
                .as_str()
                .unwrap_or("")
                .to_string()
        })
        .unwrap_or_else(|| "none".into());
    let rows = [
        ("events", s.events.to_string()),
        ("outcome", outcome),
        ("iterations", s.iterations_done.to_string()),
        ("elapsed_s", format!("{:.1}", s.elapsed)),
        ("spent", format!("{:.4}", s.spent)),
        ("preemptions", s.preemptions.to_string()),
        ("replans", s.replans.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "  {k:<12} {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_reports_empty_summary() {
        let log = EventLog::from_jsonl("").unwrap();
        let s = summarize(&log);
        assert_eq!(s.events, 0);
        assert_eq!(s.outcome, None);
        assert!(render_report(&log).contains("outcome      none"));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = EventLog::default();
        log.push(1.5, EventKind::Preemption, json!({"type_id": "p3", "count": 1}));
        log.push(2.0, EventKind::Completed, json!({"iterations_done": 4}));
        let back = EventLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.final_kind(), Some(EventKind::Completed));
    }

    #[test]
    fn bad_line_is_located() {
        let err = EventLog::from_jsonl("{\"timestamp\":0,\"kind\":\"plan\",\"payload\":{}}\nnope").unwrap_err();
        assert!(err.to_string().starts_with("line 2"));
    }
}
