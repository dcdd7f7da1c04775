//! Domain types shared by every stage of the planner.
//!
//! Units are fixed across the crate: seconds, bytes, bytes/second, samples,
//! and currency units per hour for prices. Billing is prorated linearly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latency::{LatencyError, PiecewiseLatencyModel};

/// Default maximum transmission unit in bytes.
pub const DEFAULT_MTU: f64 = 9000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("vm type {id}: {reason}")]
    InvalidVmType { id: String, reason: String },
    #[error("profile {model_id}: {reason}")]
    InvalidProfile { model_id: String, reason: String },
    #[error("profile has no latency model for device kind {0}")]
    MissingDevice(String),
    #[error("job: {0}")]
    InvalidJob(String),
    #[error("unknown vm type {0}")]
    UnknownType(String),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Billing {
    OnDemand,
    Spot,
}

/// A purchasable instance type together with the per-model batch bounds the
/// planner needs (`memcap_batch` from memory probing, `threshold_batch` from
/// the latency model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmType {
    pub id: String,
    pub device_kind: String,
    pub price_per_hour: f64,
    pub bus_bandwidth_cap: f64,
    pub memcap_batch: u64,
    pub threshold_batch: u64,
    pub quota: u32,
    pub billing: Billing,
    #[serde(default)]
    pub launch_overhead: f64,
    #[serde(default)]
    pub region: String,
    #[serde(default)]
    pub zone: String,
    #[serde(default)]
    pub placement_group: String,
    #[serde(default)]
    pub cpu_kind: String,
    #[serde(default)]
    pub rated_network: f64,
}

impl VmType {
    pub fn validate(&self) -> Result<(), TypeError> {
        let fail = |reason: &str| {
            Err(TypeError::InvalidVmType {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.price_per_hour > 0.0 && self.price_per_hour.is_finite()) {
            return fail("price_per_hour must be positive");
        }
        if !(self.bus_bandwidth_cap > 0.0 && self.bus_bandwidth_cap.is_finite()) {
            return fail("bus_bandwidth_cap must be positive");
        }
        if self.threshold_batch < 1 || self.threshold_batch > self.memcap_batch {
            return fail("need 1 <= threshold_batch <= memcap_batch");
        }
        if self.launch_overhead < 0.0 {
            return fail("launch_overhead must be non-negative");
        }
        Ok(())
    }

    /// Instances without an accelerator are marked by a `cpu` device kind.
    pub fn is_cpu_only(&self) -> bool {
        self.device_kind.eq_ignore_ascii_case("cpu")
    }

    pub fn in_placement_group(&self) -> bool {
        !self.placement_group.is_empty()
    }

    pub fn price_per_second(&self) -> f64 {
        self.price_per_hour / 3600.0
    }

    pub fn allows_batch(&self, batch: u64) -> bool {
        batch >= self.threshold_batch && batch <= self.memcap_batch
    }
}

/// A catalog of instance types offered to the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub types: Vec<VmType>,
    #[serde(default = "default_mtu")]
    pub mtu: f64,
}

fn default_mtu() -> f64 {
    DEFAULT_MTU
}

impl Catalog {
    pub fn get(&self, id: &str) -> Option<&VmType> {
        self.types.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassModels {
    pub fw: PiecewiseLatencyModel,
    pub bw: PiecewiseLatencyModel,
}

impl PassModels {
    /// Largest batch that fits for both passes.
    pub fn b_max(&self) -> u64 {
        self.fw.b_max.min(self.bw.b_max)
    }

    pub fn compute_latency(&self, batch: u64) -> Result<f64, LatencyError> {
        Ok(self.fw.predict(batch)? + self.bw.predict(batch)?)
    }
}

/// Communication and computation fingerprint of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    /// Gradient bytes per layer in back-propagation order.
    pub layer_sizes: Vec<f64>,
    /// Backward-pass completion time of each layer over total backward time.
    pub exchange_fractions: Vec<f64>,
    pub latency_models: BTreeMap<String, PassModels>,
    /// Relative standard deviation of compute latency per device kind.
    #[serde(default)]
    pub latency_stddev: BTreeMap<String, f64>,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), TypeError> {
        let fail = |reason: String| {
            Err(TypeError::InvalidProfile {
                model_id: self.model_id.clone(),
                reason,
            })
        };
        if self.layer_sizes.len() != self.exchange_fractions.len() {
            return fail(format!(
                "{} layer sizes but {} exchange fractions",
                self.layer_sizes.len(),
                self.exchange_fractions.len()
            ));
        }
        if let Some(i) = self.layer_sizes.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return fail(format!("layer {i} has non-positive gradient size"));
        }
        if let Some(i) = self.exchange_fractions.iter().position(|f| !(0.0..=1.0).contains(f)) {
            return fail(format!("layer {i} exchange fraction outside [0, 1]"));
        }
        for (kind, models) in &self.latency_models {
            models.fw.validate().map_err(|e| TypeError::InvalidProfile {
                model_id: self.model_id.clone(),
                reason: format!("{kind} forward model: {e}"),
            })?;
            models.bw.validate().map_err(|e| TypeError::InvalidProfile {
                model_id: self.model_id.clone(),
                reason: format!("{kind} backward model: {e}"),
            })?;
        }
        if let Some((kind, _)) = self.latency_stddev.iter().find(|(_, d)| !(**d >= 0.0)) {
            return fail(format!("negative latency deviation for {kind}"));
        }
        Ok(())
    }

    pub fn device(&self, kind: &str) -> Result<&PassModels, TypeError> {
        self.latency_models
            .get(kind)
            .ok_or_else(|| TypeError::MissingDevice(kind.to_string()))
    }

    pub fn relative_stddev(&self, kind: &str) -> f64 {
        self.latency_stddev.get(kind).copied().unwrap_or(0.0)
    }

    pub fn total_gradient_bytes(&self) -> f64 {
        self.layer_sizes.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanEntry {
    pub vm_type_id: String,
    pub count: u32,
    pub batch: u64,
}

/// A VM configuration answering a [`TrainJob`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub entries: Vec<PlanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_t_iter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_cost: Option<f64>,
}

impl Plan {
    pub fn new(entries: Vec<PlanEntry>) -> Self {
        Self {
            entries,
            predicted_t_iter: None,
            predicted_time: None,
            predicted_cost: None,
        }
    }

    /// One allreduce rank per instance.
    pub fn world_size(&self) -> u32 {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn global_batch(&self) -> u64 {
        self.entries.iter().map(|e| e.count as u64 * e.batch).sum()
    }

    /// Hourly price of the whole configuration. Unknown types are skipped.
    pub fn hourly_price(&self, types: &[VmType]) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| {
                types
                    .iter()
                    .find(|t| t.id == e.vm_type_id)
                    .map(|t| t.price_per_hour * e.count as f64)
            })
            .sum()
    }

    pub fn count_of(&self, type_id: &str) -> u32 {
        self.entries
            .iter()
            .filter(|e| e.vm_type_id == type_id)
            .map(|e| e.count)
            .sum()
    }

    /// Attaches predictions for `iterations` iterations at `t_iter` seconds each.
    pub fn with_prediction(mut self, t_iter: f64, iterations: u64, types: &[VmType]) -> Self {
        let time = iterations as f64 * t_iter;
        self.predicted_t_iter = Some(t_iter);
        self.predicted_time = Some(time);
        self.predicted_cost = Some(time * self.hourly_price(types) / 3600.0);
        self
    }

    /// Compact `count x type @ batch` rendering.
    pub fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}x{}@{}", e.count, e.vm_type_id, e.batch))
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinTime,
    MinCost,
}

/// A training request: what to train, for how long, under which limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    /// `model_id` of the [`ModelProfile`] this job trains.
    pub profile: String,
    #[serde(rename = "B_global")]
    pub global_batch: u64,
    #[serde(rename = "N")]
    pub iterations: u64,
    #[serde(rename = "T_lim", default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub objective: Objective,
    pub candidate_types: Vec<VmType>,
}

impl TrainJob {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.global_batch < 1 {
            return Err(TypeError::InvalidJob("B_global must be at least 1".into()));
        }
        if self.iterations < 1 {
            return Err(TypeError::InvalidJob("N must be at least 1".into()));
        }
        if self.candidate_types.is_empty() {
            return Err(TypeError::InvalidJob("no candidate types".into()));
        }
        for t in &self.candidate_types {
            t.validate()?;
        }
        Ok(())
    }

    pub fn vm_type(&self, id: &str) -> Option<&VmType> {
        self.candidate_types.iter().find(|t| t.id == id)
    }

    /// Objective value of running `plan_hourly_price` worth of instances at
    /// `t_iter` seconds per iteration for the whole job.
    pub fn objective_value(&self, t_iter: f64, plan_hourly_price: f64) -> f64 {
        let time = self.iterations as f64 * t_iter;
        match self.objective {
            Objective::MinTime => time,
            Objective::MinCost => time * plan_hourly_price / 3600.0,
        }
    }
}

/// Candidate type given either inline or by id into a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypeRef {
    Id(String),
    Inline(VmType),
}

/// On-disk form of a [`TrainJob`]; candidate types may reference a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJobFile {
    pub profile: String,
    #[serde(rename = "B_global")]
    pub global_batch: u64,
    #[serde(rename = "N")]
    pub iterations: u64,
    #[serde(rename = "T_lim", default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub objective: Objective,
    pub candidate_types: Vec<TypeRef>,
}

impl TrainJobFile {
    pub fn resolve(self, catalog: Option<&Catalog>) -> Result<TrainJob, TypeError> {
        let candidate_types = self
            .candidate_types
            .into_iter()
            .map(|r| match r {
                TypeRef::Inline(t) => Ok(t),
                TypeRef::Id(id) => catalog
                    .and_then(|c| c.get(&id))
                    .cloned()
                    .ok_or(TypeError::UnknownType(id)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let job = TrainJob {
            profile: self.profile,
            global_batch: self.global_batch,
            iterations: self.iterations,
            time_limit: self.time_limit,
            budget: self.budget,
            objective: self.objective,
            candidate_types,
        };
        job.validate()?;
        Ok(job)
    }
}

impl From<&TrainJob> for TrainJobFile {
    fn from(job: &TrainJob) -> Self {
        Self {
            profile: job.profile.clone(),
            global_batch: job.global_batch,
            iterations: job.iterations,
            time_limit: job.time_limit,
            budget: job.budget,
            objective: job.objective,
            candidate_types: job.candidate_types.iter().cloned().map(TypeRef::Inline).collect(),
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn vm(id: &str, quota: u32, threshold: u64, memcap: u64, price: f64) -> VmType {
        VmType {
            id: id.to_string(),
            device_kind: id.to_string(),
            price_per_hour: price,
            bus_bandwidth_cap: 10e9,
            memcap_batch: memcap,
            threshold_batch: threshold,
            quota,
            billing: Billing::OnDemand,
            launch_overhead: 0.0,
            region: "r1".into(),
            zone: "r1a".into(),
            placement_group: String::new(),
            cpu_kind: "xeon".into(),
            rated_network: 10e9,
        }
    }

    pub fn job(global_batch: u64, types: Vec<VmType>) -> TrainJob {
        TrainJob {
            profile: "net".into(),
            global_batch,
            iterations: 100,
            time_limit: None,
            budget: None,
            objective: Objective::MinTime,
            candidate_types: types,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn job_round_trips_with_file_field_names() {
        let j = job(256, vec![vm("A", 4, 64, 256, 1.0)]);
        let text = serde_json::to_string(&j).unwrap();
        assert!(text.contains("\"B_global\":256"));
        assert!(text.contains("\"N\":100"));
        let back: TrainJob = serde_json::from_str(&text).unwrap();
        assert_eq!(back, j);
    }

    #[test]
    fn job_file_resolves_ids_against_catalog() {
        let catalog = Catalog {
            types: vec![vm("A", 4, 64, 256, 1.0)],
            mtu: DEFAULT_MTU,
        };
        let raw = r#"{"profile":"net","B_global":256,"N":10,"objective":"min_cost",
                      "candidate_types":["A"]}"#;
        let file: TrainJobFile = serde_json::from_str(raw).unwrap();
        let job = file.clone().resolve(Some(&catalog)).unwrap();
        assert_eq!(job.candidate_types[0].id, "A");
        assert_eq!(file.resolve(None), Err(TypeError::UnknownType("A".into())));
    }

    #[test]
    fn vm_type_invariants() {
        assert!(vm("A", 4, 64, 256, 1.0).validate().is_ok());
        assert!(vm("A", 4, 300, 256, 1.0).validate().is_err());
        assert!(vm("A", 4, 64, 256, 0.0).validate().is_err());
    }

    #[test]
    fn prediction_prorates_cost() {
        let types = vec![vm("A", 4, 64, 256, 3.6)];
        let plan = Plan::new(vec![PlanEntry {
            vm_type_id: "A".into(),
            count: 2,
            batch: 128,
        }])
        .with_prediction(0.5, 100, &types);
        assert_eq!(plan.predicted_time, Some(50.0));
        // 2 instances at 3.6/h for 50 s
        assert!((plan.predicted_cost.unwrap() - 0.1).abs() < 1e-12);
    }
}
