//! Live progress tracking, gradient reweighting for heterogeneous batches,
//! and replanning when the optimistic throughput bound predicts a violation
//! or an instance type is preempted.

pub mod closed_loop;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::SolveError;
use crate::types::{Plan, TrainJob, VmType};

pub const DEFAULT_WINDOW_MINUTES: f64 = 5.0;
pub const DEFAULT_LAUNCH_OVERHEAD: f64 = 150.0;
pub const DEFAULT_DETACH_OVERHEAD: f64 = 5.0;
pub const DEFAULT_CONFIDENCE_Z: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("plan entry {0} has a zero batch")]
    ZeroBatch(String),
    #[error("plan has no instances")]
    EmptyPlan,
}

/// Per-type gradient scale `w_i = W * batch_i / B_global` with `W` the total
/// instance count. Uniform averaging of per-instance mean gradients scaled
/// by `w_i` equals the flat per-sample mean.
pub fn reweight_coefficients(plan: &Plan, global_batch: u64) -> Result<BTreeMap<String, f64>, RuntimeError> {
    let w = plan.world_size() as f64;
    if w == 0.0 || global_batch == 0 {
        return Err(RuntimeError::EmptyPlan);
    }
    plan.entries
        .iter()
        .map(|e| {
            if e.batch == 0 {
                Err(RuntimeError::ZeroBatch(e.vm_type_id.clone()))
            } else {
                Ok((e.vm_type_id.clone(), w * e.batch as f64 / global_batch as f64))
            }
        })
        .collect()
}

/// The unnormalized form `batch_i / B_global`, i.e. `w_i / W`.
pub fn sample_share_coefficients(plan: &Plan, global_batch: u64) -> Result<BTreeMap<String, f64>, RuntimeError> {
    let w = plan.world_size() as f64;
    Ok(reweight_coefficients(plan, global_batch)?
        .into_iter()
        .map(|(k, v)| (k, v / w))
        .collect())
}

/// Iteration-rate samples over the trailing window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputWindow {
    pub length_s: f64,
    samples: VecDeque<(f64, f64)>,
}

impl ThroughputWindow {
    pub fn new(minutes: f64) -> Self {
        Self {
            length_s: minutes * 60.0,
            samples: VecDeque::new(),
        }
    }

    /// Records `rate` iterations/second observed at `timestamp` and drops
    /// samples that fell out of the window.
    pub fn push(&mut self, timestamp: f64, rate: f64) {
        self.samples.push_back((timestamp, rate));
        while self
            .samples
            .front()
            .is_some_and(|(t, _)| *t < timestamp - self.length_s)
        {
            self.samples.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub mean: f64,
    pub stddev: f64,
    /// `mean + z * stddev`.
    pub optimistic: f64,
}

/// Mean, sample stddev and optimistic bound of the rates inside
/// `[now - length, now]`. `None` when the window holds no samples.
pub fn windowed_throughput(window: &ThroughputWindow, now: f64, z: f64) -> Option<ThroughputStats> {
    let rates: Vec<f64> = window
        .samples()
        .filter(|(t, _)| *t >= now - window.length_s && *t <= now)
        .map(|(_, r)| *r)
        .collect();
    if rates.is_empty() {
        return None;
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let stddev = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(ThroughputStats {
        mean,
        stddev,
        optimistic: mean + z * stddev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplanConfig {
    pub window_minutes: f64,
    pub z: f64,
    pub launch_overhead: f64,
    pub detach_overhead: f64,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        Self {
            window_minutes: DEFAULT_WINDOW_MINUTES,
            z: DEFAULT_CONFIDENCE_Z,
            launch_overhead: DEFAULT_LAUNCH_OVERHEAD,
            detach_overhead: DEFAULT_DETACH_OVERHEAD,
        }
    }
}

impl ReplanConfig {
    pub fn switch_overhead(&self) -> f64 {
        self.launch_overhead + self.detach_overhead
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressState {
    pub elapsed: f64,
    pub spent: f64,
    pub iterations_done: u64,
    pub window: ThroughputWindow,
    pub active_plan: Plan,
    pub blacklisted_types: BTreeSet<String>,
}

impl ProgressState {
    pub fn new(plan: Plan, config: &ReplanConfig) -> Self {
        Self {
            elapsed: 0.0,
            spent: 0.0,
            iterations_done: 0,
            window: ThroughputWindow::new(config.window_minutes),
            active_plan: plan,
            blacklisted_types: BTreeSet::new(),
        }
    }

    /// Currency per second of the active plan.
    pub fn burn_rate(&self, types: &[VmType]) -> f64 {
        self.active_plan.hourly_price(types) / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "plan", rename_all = "snake_case")]
pub enum Action {
    Keep,
    Replan(Plan),
    Unsat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    #[serde(flatten)]
    pub action: Action,
    pub optimistic_throughput: f64,
    pub reason: String,
    /// Limits the replacement plan had to meet, when the optimizer ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_time_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_budget: Option<f64>,
}

impl SwitchDecision {
    fn keep(optimistic: f64, reason: impl Into<String>) -> Self {
        Self {
            action: Action::Keep,
            optimistic_throughput: optimistic,
            reason: reason.into(),
            residual_time_limit: None,
            residual_budget: None,
        }
    }

    pub fn is_replan(&self) -> bool {
        matches!(self.action, Action::Replan(_))
    }
}

/// What remains of `job` after `state`: fewer iterations, limits reduced by
/// progress so far and by the switch overheads, candidates without
/// blacklisted types. Instances of a blacklisted type that are still running
/// stay available up to their surviving count.
pub fn residual_job(state: &ProgressState, job: &TrainJob, config: &ReplanConfig) -> TrainJob {
    let overhead = config.switch_overhead();
    let burn = state.burn_rate(&job.candidate_types);
    let mut residual = job.clone();
    residual.iterations = job.iterations.saturating_sub(state.iterations_done);
    residual.time_limit = job.time_limit.map(|t| t - state.elapsed - overhead);
    residual.budget = job.budget.map(|b| b - state.spent - burn * overhead);
    residual.candidate_types = job
        .candidate_types
        .iter()
        .filter_map(|t| {
            if !state.blacklisted_types.contains(&t.id) {
                return Some(t.clone());
            }
            let survivors = state.active_plan.count_of(&t.id);
            (survivors > 0).then(|| VmType {
                quota: survivors.min(t.quota),
                ..t.clone()
            })
        })
        .collect();
    residual
}

fn replan<F>(
    state: &ProgressState,
    job: &TrainJob,
    planner: F,
    config: &ReplanConfig,
    optimistic: f64,
    why: &str,
) -> SwitchDecision
where
    F: Fn(&TrainJob) -> Result<Plan, SolveError>,
{
    let residual = residual_job(state, job, config);
    let mut decision = SwitchDecision {
        action: Action::Unsat,
        optimistic_throughput: optimistic,
        reason: String::new(),
        residual_time_limit: residual.time_limit,
        residual_budget: residual.budget,
    };
    if residual.time_limit.is_some_and(|t| t <= 0.0) || residual.budget.is_some_and(|b| b <= 0.0) {
        decision.reason = format!("{why}; no time or budget left after switch overheads");
        return decision;
    }
    if residual.candidate_types.is_empty() {
        decision.reason = format!("{why}; no instance types left");
        return decision;
    }
    match planner(&residual) {
        Ok(plan) if plan.entries == state.active_plan.entries => {
            SwitchDecision::keep(optimistic, format!("{why}; current configuration is still the best"))
        }
        Ok(plan) => {
            decision.reason = format!("{why}; switching to {}", plan.describe());
            decision.action = Action::Replan(plan);
            decision
        }
        Err(e) => {
            decision.reason = format!("{why}; {e}");
            decision
        }
    }
}

/// Keeps the current plan while the optimistic projection meets the
/// original limits; otherwise reruns `planner` on the residual job.
pub fn check_and_replan<F>(state: &ProgressState, job: &TrainJob, planner: F, config: &ReplanConfig) -> SwitchDecision
where
    F: Fn(&TrainJob) -> Result<Plan, SolveError>,
{
    let remaining = job.iterations.saturating_sub(state.iterations_done);
    if remaining == 0 {
        return SwitchDecision::keep(0.0, "all iterations done");
    }
    let Some(stats) = windowed_throughput(&state.window, state.elapsed, config.z) else {
        return SwitchDecision::keep(0.0, "no throughput samples yet");
    };
    let optimistic = stats.optimistic;
    let finish = state.elapsed + remaining as f64 / optimistic;
    let cost = state.spent + state.burn_rate(&job.candidate_types) * remaining as f64 / optimistic;
    let time_ok = job.time_limit.is_none_or(|t| finish <= t);
    let cost_ok = job.budget.is_none_or(|b| cost <= b);
    if time_ok && cost_ok {
        return SwitchDecision::keep(
            optimistic,
            format!("projected finish {finish:.1}s, cost {cost:.4} within limits"),
        );
    }
    let why = if !time_ok {
        format!("projected finish {finish:.1}s exceeds time limit")
    } else {
        format!("projected cost {cost:.4} exceeds budget")
    };
    replan(state, job, planner, config, optimistic, &why)
}

/// Removes `count` preempted instances of `type_id`, blacklists the type and
/// replans on the surviving capacity. Preemption of a type that is not
/// running is ignored.
pub fn on_preemption<F>(
    state: &mut ProgressState,
    type_id: &str,
    count: u32,
    job: &TrainJob,
    planner: F,
    config: &ReplanConfig,
) -> SwitchDecision
where
    F: Fn(&TrainJob) -> Result<Plan, SolveError>,
{
    if state.active_plan.count_of(type_id) == 0 {
        return SwitchDecision::keep(0.0, format!("ignored preemption of inactive type {type_id}"));
    }
    state.blacklisted_types.insert(type_id.to_string());
    for e in state.active_plan.entries.iter_mut().filter(|e| e.vm_type_id == type_id) {
        e.count = e.count.saturating_sub(count);
    }
    state.active_plan.entries.retain(|e| e.count > 0);
    state.window.clear();
    replan(state, job, planner, config, 0.0, &format!("{type_id} preempted"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::fixtures::{job, vm};
    use crate::types::PlanEntry;

    fn plan(entries: &[(&str, u32, u64)]) -> Plan {
        Plan::new(
            entries
                .iter()
                .map(|(id, c, b)| PlanEntry {
                    vm_type_id: id.to_string(),
                    count: *c,
                    batch: *b,
                })
                .collect(),
        )
    }

    #[test]
    fn homogeneous_weights_are_one() {
        let w = reweight_coefficients(&plan(&[("A", 4, 64)]), 256).unwrap();
        assert_eq!(w["A"], 1.0);
    }

    #[test]
    fn heterogeneous_weights() {
        let p = plan(&[("A", 1, 64), ("B", 1, 192)]);
        let w = reweight_coefficients(&p, 256).unwrap();
        assert_eq!((w["A"], w["B"]), (0.5, 1.5));
        let share = sample_share_coefficients(&p, 256).unwrap();
        assert_eq!((share["A"], share["B"]), (0.25, 0.75));
    }

    #[test]
    fn zero_batch_rejected() {
        assert_eq!(
            reweight_coefficients(&plan(&[("A", 1, 0)]), 256),
            Err(RuntimeError::ZeroBatch("A".into()))
        );
    }

    #[test]
    fn window_statistics() {
        let mut w = ThroughputWindow::new(5.0);
        for t in 0..10 {
            w.push(t as f64, 10.0);
        }
        let s = windowed_throughput(&w, 9.0, 1.96).unwrap();
        assert_eq!((s.mean, s.stddev, s.optimistic), (10.0, 0.0, 10.0));

        let mut w = ThroughputWindow::new(5.0);
        w.push(0.0, 8.0);
        w.push(1.0, 12.0);
        let s = windowed_throughput(&w, 1.0, 1.96).unwrap();
        assert_eq!(s.mean, 10.0);
        assert!((s.stddev - 4.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((s.optimistic - (10.0 + 1.96 * 4.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!(windowed_throughput(&ThroughputWindow::new(5.0), 0.0, 1.96).is_none());
    }

    #[test]
    fn window_evicts_old_samples() {
        let mut w = ThroughputWindow::new(1.0);
        w.push(0.0, 1.0);
        w.push(61.0, 3.0);
        assert_eq!(w.len(), 1);
    }

    fn state(p: Plan, rates: &[(f64, f64)], elapsed: f64, done: u64) -> ProgressState {
        let mut s = ProgressState::new(p, &ReplanConfig::default());
        for &(t, r) in rates {
            s.window.push(t, r);
        }
        s.elapsed = elapsed;
        s.iterations_done = done;
        s
    }

    fn never(_: &TrainJob) -> Result<Plan, SolveError> {
        panic!("optimizer must not run")
    }

    #[test]
    fn healthy_run_keeps() {
        let mut j = job(256, vec![vm("A", 4, 64, 256, 1.0)]);
        j.time_limit = Some(100.0);
        let s = state(plan(&[("A", 2, 128)]), &[(9.0, 10.0), (10.0, 10.0)], 10.0, 50);
        let d = check_and_replan(&s, &j, never, &ReplanConfig::default());
        assert_eq!(d.action, Action::Keep);
    }

    #[test]
    fn transient_dip_absorbed_by_bound() {
        // mean 1.6 it/s would miss the limit; the optimistic bound does not
        let mut j = job(256, vec![vm("A", 4, 64, 256, 1.0)]);
        j.iterations = 100;
        j.time_limit = Some(60.0);
        let rates = [(1.0, 2.0), (2.0, 2.0), (3.0, 2.0), (4.0, 2.0), (5.0, 0.0)];
        let s = state(plan(&[("A", 2, 128)]), &rates, 10.0, 0);
        let stats = windowed_throughput(&s.window, 10.0, 1.96).unwrap();
        assert!(10.0 + 100.0 / stats.mean > 60.0);
        let d = check_and_replan(&s, &j, never, &ReplanConfig::default());
        assert_eq!(d.action, Action::Keep);
    }

    #[test]
    fn lagging_run_replans_on_residual_job() {
        let mut j = job(256, vec![vm("A", 4, 64, 256, 1.0), vm("B", 4, 64, 256, 1.0)]);
        j.time_limit = Some(1000.0);
        j.iterations = 1000;
        let s = state(plan(&[("A", 2, 128)]), &[(100.0, 0.5)], 100.0, 100);
        let seen = std::cell::RefCell::new(None);
        let d = check_and_replan(
            &s,
            &j,
            |r: &TrainJob| {
                *seen.borrow_mut() = Some((r.iterations, r.time_limit));
                Ok(plan(&[("B", 2, 128)]))
            },
            &ReplanConfig::default(),
        );
        assert!(d.is_replan());
        assert_eq!(seen.into_inner(), Some((900, Some(1000.0 - 100.0 - 155.0))));
    }

    #[test]
    fn preempting_sole_type_is_unsat() {
        let mut j = job(512, vec![vm("A", 2, 256, 256, 1.0)]);
        j.time_limit = Some(1000.0);
        let mut s = state(plan(&[("A", 2, 256)]), &[], 100.0, 10);
        let d = on_preemption(
            &mut s,
            "A",
            1,
            &j,
            |r: &TrainJob| {
                assert_eq!(r.candidate_types[0].quota, 1);
                Err(SolveError::Unsat {
                    reason: "no capacity".into(),
                    best_infeasible: None,
                    stats: None,
                })
            },
            &ReplanConfig::default(),
        );
        assert_eq!(d.action, Action::Unsat);
    }

    #[test]
    fn double_preemption_keeps_blacklist_a_set() {
        let j = job(512, vec![vm("A", 4, 128, 256, 1.0), vm("B", 8, 64, 64, 1.0)]);
        let mut s = state(plan(&[("A", 4, 128)]), &[], 0.0, 0);
        let ok = |_: &TrainJob| Ok(plan(&[("B", 8, 64)]));
        on_preemption(&mut s, "A", 1, &j, ok, &ReplanConfig::default());
        on_preemption(&mut s, "A", 1, &j, ok, &ReplanConfig::default());
        assert_eq!(s.blacklisted_types.len(), 1);
        assert_eq!(s.active_plan.count_of("A"), 2);
        let d = on_preemption(&mut s, "B", 1, &j, ok, &ReplanConfig::default());
        assert!(d.reason.contains("ignored"));
    }
}
