//! Configuration search: pruning, exhaustive evaluation when the space is
//! small, and an anchor-batch approximation when it is not.

mod counts;

pub use counts::{solve_counts, CountItem};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{IterationPredictor, Selection, SelectionEntry, SimError};
use crate::types::{ModelProfile, Objective, Plan, PlanEntry, TrainJob, TypeError, VmType};
use crate::validate::{validate_plan, PlanError, Violation};

pub const DEFAULT_EXHAUSTIVE_GATE: u64 = 10_000;

pub const REASON_NO_TYPES: &str = "no candidate instance types";
pub const REASON_PRUNED: &str = "batch bounds/quota eliminate all configurations";
pub const REASON_CONSTRAINTS: &str = "every configuration violates the time limit or budget";
pub const REASON_ANCHORS: &str = "no anchor batch yields a feasible configuration";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    AnchorApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceStats {
    pub candidate_batch_sets: BTreeMap<String, Vec<u64>>,
    /// `prod(1 + |batches_i| * quota_i) - 1`: per-type (batch, count)
    /// tuples before the batch-sum filter.
    pub estimated_sim_invocations: u64,
    pub mode_used: SearchMode,
    pub sims_executed: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("unsat: {reason}")]
    Unsat {
        reason: String,
        best_infeasible: Option<Box<Plan>>,
        stats: Option<Box<SearchSpaceStats>>,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Job(#[from] TypeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("optimizer emitted a plan with violations: {0:?}")]
    Invalid(Vec<Violation>),
}

impl SolveError {
    fn unsat(reason: &str, best_infeasible: Option<Plan>, stats: Option<SearchSpaceStats>) -> Self {
        SolveError::Unsat {
            reason: reason.to_string(),
            best_infeasible: best_infeasible.map(Box::new),
            stats: stats.map(Box::new),
        }
    }

    pub fn is_unsat(&self) -> bool {
        matches!(self, SolveError::Unsat { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub exhaustive_gate: u64,
    /// Overrides the gate; used to compare the two modes on one job.
    pub force_mode: Option<SearchMode>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            exhaustive_gate: DEFAULT_EXHAUSTIVE_GATE,
            force_mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub plan: Plan,
    pub stats: SearchSpaceStats,
}

/// Types and local batches that survive pruning, in job order.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub types: Vec<VmType>,
    pub batches: Vec<Vec<u64>>,
}

impl SearchSpace {
    /// Every `(type, batch, count)` tuple assignment whose batches sum to
    /// `global_batch`, each as plan entries in type order.
    pub fn enumerate(&self, global_batch: u64) -> Vec<Vec<PlanEntry>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        self.walk(0, global_batch, &mut current, &mut out);
        out
    }

    fn walk(&self, i: usize, remaining: u64, current: &mut Vec<PlanEntry>, out: &mut Vec<Vec<PlanEntry>>) {
        if i == self.types.len() {
            if remaining == 0 && !current.is_empty() {
                out.push(current.clone());
            }
            return;
        }
        self.walk(i + 1, remaining, current, out);
        let t = &self.types[i];
        for &b in &self.batches[i] {
            for count in 1..=t.quota {
                let used = b * count as u64;
                if used > remaining {
                    break;
                }
                current.push(PlanEntry {
                    vm_type_id: t.id.clone(),
                    count,
                    batch: b,
                });
                self.walk(i + 1, remaining - used, current, out);
                current.pop();
            }
        }
    }
}

fn powers_of_two_between(lo: u64, hi: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut b = 1u64;
    while b <= hi {
        if b >= lo {
            out.push(b);
        }
        match b.checked_mul(2) {
            Some(n) => b = n,
            None => break,
        }
    }
    out
}

/// Applies the pruning rules: GPU types shadow CPU-only types, local batches
/// are powers of two inside `[threshold, memcap]` and at most `B_global`,
/// and all instances of a type share one batch.
pub fn prune_search_space(job: &TrainJob) -> Result<(SearchSpace, SearchSpaceStats), SolveError> {
    if job.candidate_types.is_empty() {
        return Err(SolveError::unsat(REASON_NO_TYPES, None, None));
    }
    let any_gpu = job.candidate_types.iter().any(|t| !t.is_cpu_only());
    let mut space = SearchSpace {
        types: Vec::new(),
        batches: Vec::new(),
    };
    for t in &job.candidate_types {
        if any_gpu && t.is_cpu_only() {
            continue;
        }
        let bs = powers_of_two_between(t.threshold_batch, t.memcap_batch.min(job.global_batch));
        if bs.is_empty() || t.quota == 0 {
            continue;
        }
        space.types.push(t.clone());
        space.batches.push(bs);
    }
    let estimate = space
        .types
        .iter()
        .zip(&space.batches)
        .fold(1u128, |acc, (t, bs)| {
            acc.saturating_mul(1 + bs.len() as u128 * t.quota as u128)
        })
        .saturating_sub(1)
        .min(u64::MAX as u128) as u64;
    let stats = SearchSpaceStats {
        candidate_batch_sets: space
            .types
            .iter()
            .zip(&space.batches)
            .map(|(t, bs)| (t.id.clone(), bs.clone()))
            .collect(),
        estimated_sim_invocations: estimate,
        mode_used: SearchMode::Exhaustive,
        sims_executed: 0,
        wall_time_s: 0.0,
    };
    // cheap feasibility check: can any combination reach B_global at all?
    let reachable = {
        let mut seen = vec![false; job.global_batch as usize + 1];
        seen[0] = true;
        for (t, bs) in space.types.iter().zip(&space.batches) {
            let mut next = seen.clone();
            for &b in bs {
                for s in 0..seen.len() {
                    if !seen[s] {
                        continue;
                    }
                    for k in 1..=t.quota as u64 {
                        let v = s as u64 + k * b;
                        if v > job.global_batch {
                            break;
                        }
                        next[v as usize] = true;
                    }
                }
            }
            seen = next;
        }
        seen[job.global_batch as usize]
    };
    if !reachable {
        return Err(SolveError::unsat(REASON_PRUNED, None, Some(stats)));
    }
    Ok((space, stats))
}

/// A candidate scored by the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub plan: Plan,
    pub objective: f64,
    pub feasible: bool,
}

fn selection_of(entries: &[PlanEntry], types: &[VmType]) -> Selection {
    Selection::new(
        entries
            .iter()
            .map(|e| SelectionEntry {
                vm_type: types
                    .iter()
                    .find(|t| t.id == e.vm_type_id)
                    .expect("entries come from the search space")
                    .clone(),
                count: e.count,
                batch: e.batch,
            })
            .collect(),
    )
}

pub fn evaluate<P: IterationPredictor + ?Sized>(
    job: &TrainJob,
    types: &[VmType],
    entries: Vec<PlanEntry>,
    predictor: &P,
) -> Result<Evaluated, SimError> {
    let t_iter = predictor.predict_t_iter(&selection_of(&entries, types))?;
    let plan = Plan::new(entries).with_prediction(t_iter, job.iterations, types);
    let time = plan.predicted_time.expect("set above");
    let cost = plan.predicted_cost.expect("set above");
    let feasible = job.time_limit.is_none_or(|lim| time <= lim) && job.budget.is_none_or(|lim| cost <= lim);
    let objective = match job.objective {
        Objective::MinTime => time,
        Objective::MinCost => cost,
    };
    Ok(Evaluated {
        plan,
        objective,
        feasible,
    })
}

fn sorted_key(plan: &Plan) -> Vec<(&str, u32, u64)> {
    let mut k: Vec<(&str, u32, u64)> = plan
        .entries
        .iter()
        .map(|e| (e.vm_type_id.as_str(), e.count, e.batch))
        .collect();
    k.sort();
    k
}

/// Total order used to pick a winner: objective, then fewer instances, then
/// lower hourly price, then type ids lexicographically.
pub fn rank(a: &Evaluated, b: &Evaluated, types: &[VmType]) -> Ordering {
    a.objective
        .total_cmp(&b.objective)
        .then(a.plan.world_size().cmp(&b.plan.world_size()))
        .then(a.plan.hourly_price(types).total_cmp(&b.plan.hourly_price(types)))
        .then_with(|| sorted_key(&a.plan).cmp(&sorted_key(&b.plan)))
}

fn evaluate_all<P: IterationPredictor + ?Sized>(
    job: &TrainJob,
    types: &[VmType],
    candidates: Vec<Vec<PlanEntry>>,
    predictor: &P,
) -> Result<Vec<Evaluated>, SimError> {
    candidates
        .into_par_iter()
        .map(|c| evaluate(job, types, c, predictor))
        .collect()
}

/// Best feasible and best infeasible candidate.
fn pick(types: &[VmType], evaluated: Vec<Evaluated>) -> (Option<Evaluated>, Option<Evaluated>) {
    let (feasible, infeasible): (Vec<_>, Vec<_>) = evaluated.into_iter().partition(|e| e.feasible);
    let best = |v: Vec<Evaluated>| v.into_iter().min_by(|a, b| rank(a, b, types));
    (best(feasible), best(infeasible))
}

/// Evaluates every pruned candidate and returns the best feasible plan.
pub fn exhaustive_search<P: IterationPredictor + ?Sized>(
    job: &TrainJob,
    space: &SearchSpace,
    predictor: &P,
    stats: &mut SearchSpaceStats,
) -> Result<Plan, SolveError> {
    stats.mode_used = SearchMode::Exhaustive;
    let candidates = space.enumerate(job.global_batch);
    stats.sims_executed = candidates.len() as u64;
    let evaluated = evaluate_all(job, &space.types, candidates, predictor)?;
    match pick(&space.types, evaluated) {
        (Some(best), _) => Ok(best.plan),
        (None, worst) => Err(SolveError::unsat(
            REASON_CONSTRAINTS,
            worst.map(|e| e.plan),
            Some(stats.clone()),
        )),
    }
}

/// Batches latency-balanced against `anchor` at `b_anchor`: each type gets
/// the largest of its candidate batches whose compute latency does not
/// exceed the anchor's. Types with no such batch are left out.
pub fn anchor_batches(
    b_anchor: u64,
    anchor: &VmType,
    space: &SearchSpace,
    profile: &ModelProfile,
) -> Result<BTreeMap<String, u64>, SimError> {
    let target = profile.device(&anchor.device_kind)?.compute_latency(b_anchor)?;
    let mut out = BTreeMap::new();
    for (t, bs) in space.types.iter().zip(&space.batches) {
        if t.id == anchor.id {
            out.insert(t.id.clone(), b_anchor);
            continue;
        }
        let models = profile.device(&t.device_kind)?;
        // latency is non-decreasing in batch, so binary search the list
        let mut lo = 0usize;
        let mut hi = bs.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if models.compute_latency(bs[mid])? <= target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo > 0 {
            out.insert(t.id.clone(), bs[lo - 1]);
        }
    }
    Ok(out)
}

/// Sweeps every power-of-two anchor batch of every type, solves instance
/// counts for the balanced batches and simulates each distinct result once.
pub fn approx_solve<P: IterationPredictor + ?Sized>(
    job: &TrainJob,
    space: &SearchSpace,
    profile: &ModelProfile,
    predictor: &P,
    stats: &mut SearchSpaceStats,
) -> Result<Plan, SolveError> {
    stats.mode_used = SearchMode::AnchorApprox;
    let mut subproblems: BTreeSet<BTreeMap<String, u64>> = BTreeSet::new();
    for (anchor, bs) in space.types.iter().zip(&space.batches) {
        for &b in bs {
            subproblems.insert(anchor_batches(b, anchor, space, profile)?);
        }
    }
    let mut candidates: Vec<Vec<PlanEntry>> = Vec::new();
    for batches in &subproblems {
        let chosen: Vec<&VmType> = space.types.iter().filter(|t| batches.contains_key(&t.id)).collect();
        let items: Vec<CountItem> = chosen
            .iter()
            .map(|t| CountItem {
                batch: batches[&t.id],
                quota: t.quota,
                price: t.price_per_hour,
            })
            .collect();
        if let Some(counts) = solve_counts(&items, job.global_batch) {
            let entries: Vec<PlanEntry> = chosen
                .iter()
                .zip(&counts)
                .filter(|(_, &c)| c > 0)
                .map(|(t, &c)| PlanEntry {
                    vm_type_id: t.id.clone(),
                    count: c,
                    batch: batches[&t.id],
                })
                .collect();
            if !entries.is_empty() && !candidates.contains(&entries) {
                candidates.push(entries);
            }
        }
    }
    stats.sims_executed = candidates.len() as u64;
    let evaluated = evaluate_all(job, &space.types, candidates, predictor)?;
    match pick(&space.types, evaluated) {
        (Some(best), _) => Ok(best.plan),
        (None, worst) => {
            let reason = if worst.is_some() {
                REASON_CONSTRAINTS
            } else {
                REASON_ANCHORS
            };
            Err(SolveError::unsat(reason, worst.map(|e| e.plan), Some(stats.clone())))
        }
    }
}

/// `Instant::now` panics on bare wasm, so stats go without a clock there.
fn now() -> Option<Instant> {
    if cfg!(all(target_arch = "wasm32", target_os = "unknown")) {
        None
    } else {
        Some(Instant::now())
    }
}

/// Prunes, picks a mode by the exhaustive gate, searches, and checks the
/// result against every constraint of the job.
pub fn solve<P: IterationPredictor + ?Sized>(
    job: &TrainJob,
    profile: &ModelProfile,
    predictor: &P,
    config: &SolverConfig,
) -> Result<Solution, SolveError> {
    let started = now();
    if job.candidate_types.is_empty() {
        return Err(SolveError::unsat(REASON_NO_TYPES, None, None));
    }
    job.validate()?;
    let (space, mut stats) = prune_search_space(job)?;
    let mode = config
        .force_mode
        .unwrap_or(if stats.estimated_sim_invocations > config.exhaustive_gate {
            SearchMode::AnchorApprox
        } else {
            SearchMode::Exhaustive
        });
    let plan = match mode {
        SearchMode::Exhaustive => exhaustive_search(job, &space, predictor, &mut stats)?,
        SearchMode::AnchorApprox => approx_solve(job, &space, profile, predictor, &mut stats)?,
    };
    let violations = validate_plan(&plan, job)?;
    if !violations.is_empty() {
        return Err(SolveError::Invalid(violations));
    }
    stats.wall_time_s = started.map_or(0.0, |t| t.elapsed().as_secs_f64());
    Ok(Solution { plan, stats })
}
