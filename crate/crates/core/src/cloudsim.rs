//! Seeded synthetic cloud used as ground truth.
//!
//! Each allocation draws one bandwidth factor for the whole placement and a
//! compute bias per VM. Every measurement then adds temporal noise drawn from
//! a stream keyed by the allocation seed and a call counter, so results are
//! reproducible call for call.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::{run_exchange, TransferRequest};
use crate::netmodel::{allreduce_time, effective_bytes, ProbeFeatures};
use crate::profiler::{
    assemble_profile, find_max_batch, probe_schedule, BackwardTrace, DeviceProbes, LatencySample, ProfileError,
};
use crate::seed;
use crate::types::{ModelProfile, PassModels, VmType};

pub const DEFAULT_SIZE_HALF_SATURATION: f64 = 4.0 * 1024.0 * 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("cloud spec has no type {0}")]
    UnknownType(String),
    #[error("invalid cloud spec: {0}")]
    InvalidSpec(String),
    #[error("allreduce needs at least two participants, got {0}")]
    TooFewParticipants(u32),
    #[error("batch {batch} does not fit on {type_id}")]
    OutOfMemory { type_id: String, batch: u64 },
    #[error("expected {expected} batches, got {got}")]
    BatchCount { expected: usize, got: usize },
}

/// Ground-truth behaviour of one instance type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueType {
    pub latency: PassModels,
    /// Relative per-iteration compute noise.
    pub temporal_stddev: f64,
    pub base_bus_bw: f64,
    pub bus_bandwidth_cap: f64,
}

/// Layer structure of the workload being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub model_id: String,
    pub layer_sizes: Vec<f64>,
    pub exchange_fractions: Vec<f64>,
}

/// A scripted preemption. Fires at `time` seconds, or after
/// `at_iteration` completed iterations when that is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreemptionEvent {
    #[serde(default)]
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_iteration: Option<u64>,
    pub type_id: String,
    pub count: u32,
}

impl PreemptionEvent {
    pub fn is_due(&self, now: f64, iterations_done: u64) -> bool {
        match self.at_iteration {
            Some(n) => iterations_done >= n,
            None => now >= self.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    /// Keyed by vm type id.
    pub types: BTreeMap<String, TrueType>,
    pub workload: Workload,
    pub allocation_factor_range: [f64; 2],
    pub temporal_bw_stddev: f64,
    pub compute_bias_stddev: f64,
    pub compute_bias_range: [f64; 2],
    pub size_half_saturation: f64,
    #[serde(default)]
    pub preemptions: Vec<PreemptionEvent>,
    #[serde(default)]
    pub seed: u64,
}

impl CloudSpec {
    /// Spec with the default variance calibration.
    pub fn new(types: BTreeMap<String, TrueType>, workload: Workload) -> Self {
        Self {
            types,
            workload,
            allocation_factor_range: [1.0 / 1.8, 1.0],
            temporal_bw_stddev: 0.05,
            compute_bias_stddev: 0.03,
            compute_bias_range: [0.9, 1.1],
            size_half_saturation: DEFAULT_SIZE_HALF_SATURATION,
            preemptions: Vec::new(),
            seed: 0,
        }
    }

    /// Same cloud with every source of variance switched off.
    pub fn variance_free(&self) -> Self {
        let mut s = self.clone();
        s.allocation_factor_range = [1.0, 1.0];
        s.temporal_bw_stddev = 0.0;
        s.compute_bias_stddev = 0.0;
        s.compute_bias_range = [1.0, 1.0];
        for t in s.types.values_mut() {
            t.temporal_stddev = 0.0;
        }
        s
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let [lo, hi] = self.allocation_factor_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CloudError::InvalidSpec(
                "allocation_factor_range must lie in (0, 1]".into(),
            ));
        }
        let [blo, bhi] = self.compute_bias_range;
        if !(blo > 0.0 && blo <= 1.0 && bhi >= 1.0) {
            return Err(CloudError::InvalidSpec("compute_bias_range must contain 1".into()));
        }
        if self.temporal_bw_stddev < 0.0 || self.compute_bias_stddev < 0.0 {
            return Err(CloudError::InvalidSpec(
                "standard deviations must be non-negative".into(),
            ));
        }
        if self.workload.layer_sizes.len() != self.workload.exchange_fractions.len() {
            return Err(CloudError::InvalidSpec("workload layer lengths differ".into()));
        }
        for (id, t) in &self.types {
            if t.temporal_stddev < 0.0 || !(t.base_bus_bw > 0.0) || !(t.bus_bandwidth_cap > 0.0) {
                return Err(CloudError::InvalidSpec(format!("type {id} has invalid parameters")));
            }
        }
        Ok(())
    }

    pub fn get(&self, type_id: &str) -> Result<&TrueType, CloudError> {
        self.types
            .get(type_id)
            .ok_or_else(|| CloudError::UnknownType(type_id.to_string()))
    }

    /// `s / (s + s_half)`: small buffers reach a lower bus bandwidth.
    pub fn size_efficiency(&self, s: f64) -> f64 {
        if self.size_half_saturation <= 0.0 {
            1.0
        } else {
            s / (s + self.size_half_saturation)
        }
    }

    /// Largest batch that fits on the type.
    pub fn fits(&self, type_id: &str, batch: u64) -> Result<bool, CloudError> {
        Ok(batch >= 1 && batch <= self.get(type_id)?.latency.b_max())
    }

    /// Bandwidth the selection would see on an allocation with `factor`,
    /// before temporal noise: the slowest type decides.
    pub fn mean_bus_bw(&self, type_ids: &[&str], factor: f64, s: f64) -> Result<f64, CloudError> {
        let mut b = f64::INFINITY;
        for id in type_ids {
            b = b.min(self.get(id)?.base_bus_bw);
        }
        Ok(b * factor * self.size_efficiency(s))
    }

    /// The workload expressed as a profile carrying the true latency models.
    pub fn true_profile(&self, catalog: &[VmType]) -> ModelProfile {
        let mut latency_models = BTreeMap::new();
        let mut latency_stddev = BTreeMap::new();
        for vm in catalog {
            if let Some(t) = self.types.get(&vm.id) {
                latency_models.insert(vm.device_kind.clone(), t.latency.clone());
                latency_stddev.insert(vm.device_kind.clone(), t.temporal_stddev);
            }
        }
        ModelProfile {
            model_id: self.workload.model_id.clone(),
            layer_sizes: self.workload.layer_sizes.clone(),
            exchange_fractions: self.workload.exchange_fractions.clone(),
            latency_models,
            latency_stddev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub type_id: String,
    pub bandwidth_factor: f64,
    pub compute_bias: f64,
}

/// A concrete placement of instances. Stateful: each measurement advances an
/// internal counter that keys its noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub allocation_id: u64,
    pub seed: u64,
    pub bandwidth_factor: f64,
    pub instances: Vec<Instance>,
    counter: u64,
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd <= 0.0 {
        return mean.clamp(lo, hi);
    }
    let dist = Normal::new(mean, sd).expect("finite sd");
    for _ in 0..64 {
        let x = dist.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

fn temporal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    truncated_normal(rng, 1.0, sd, 0.5, 1.5)
}

/// Draws a placement for `request` (type id to count).
pub fn allocate(spec: &CloudSpec, request: &BTreeMap<String, u32>, seed_value: u64) -> Result<Allocation, CloudError> {
    for id in request.keys() {
        spec.get(id)?;
    }
    let mut rng = seed::rng(seed_value);
    let [lo, hi] = spec.allocation_factor_range;
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let [blo, bhi] = spec.compute_bias_range;
    let mut instances = Vec::new();
    for (id, &count) in request {
        for _ in 0..count {
            instances.push(Instance {
                type_id: id.clone(),
                bandwidth_factor: factor,
                compute_bias: truncated_normal(&mut rng, 1.0, spec.compute_bias_stddev, blo, bhi),
            });
        }
    }
    Ok(Allocation {
        allocation_id: seed_value,
        seed: seed_value,
        bandwidth_factor: factor,
        instances,
        counter: 0,
    })
}

impl Allocation {
    fn next_rng(&mut self, label: &str) -> ChaCha8Rng {
        self.counter += 1;
        seed::rng(seed::derive(self.seed, &format!("{label}/{}", self.counter)))
    }

    pub fn type_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.instances.iter().map(|i| i.type_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Measured duration of one allreduce of `s` bytes.
    pub fn probe_allreduce(
        &mut self,
        spec: &CloudSpec,
        s: f64,
        participants: u32,
        _concurrent: u32,
    ) -> Result<f64, CloudError> {
        if participants < 2 {
            return Err(CloudError::TooFewParticipants(participants));
        }
        let mut rng = self.next_rng("probe");
        let noise = temporal(&mut rng, spec.temporal_bw_stddev);
        let ids = self.type_ids();
        let b_true = spec.mean_bus_bw(&ids, self.bandwidth_factor, s)? * noise;
        Ok(allreduce_time(s, participants, b_true).expect("positive bandwidth"))
    }

    /// Forward and backward latency of one step on instance `index`.
    pub fn probe_compute(&mut self, spec: &CloudSpec, index: usize, batch: u64) -> Result<(f64, f64), CloudError> {
        let inst = &self.instances[index];
        let t = spec.get(&inst.type_id)?;
        let (fw, bw) = match (t.latency.fw.predict(batch), t.latency.bw.predict(batch)) {
            (Ok(fw), Ok(bw)) => (fw, bw),
            _ => {
                return Err(CloudError::OutOfMemory {
                    type_id: inst.type_id.clone(),
                    batch,
                })
            }
        };
        let bias = inst.compute_bias;
        let sd = t.temporal_stddev;
        let mut rng = self.next_rng("compute");
        let n_fw = temporal(&mut rng, sd);
        let n_bw = temporal(&mut rng, sd);
        Ok((fw * bias * n_fw, bw * bias * n_bw))
    }

    /// Replicated latency samples on instance `index` at each batch.
    pub fn profile_compute(
        &mut self,
        spec: &CloudSpec,
        index: usize,
        batches: &[u64],
        replicates: u32,
    ) -> Result<Vec<LatencySample>, CloudError> {
        let mut out = Vec::new();
        for &b in batches {
            for r in 0..replicates {
                let (fw, bw) = self.probe_compute(spec, index, b)?;
                out.push(LatencySample {
                    batch: b,
                    fw_latency: fw,
                    bw_latency: bw,
                    replicate_index: r,
                });
            }
        }
        Ok(out)
    }

    /// Per-layer completion times of one backward pass on instance `index`.
    pub fn trace_backward(&mut self, spec: &CloudSpec, index: usize, batch: u64) -> Result<BackwardTrace, CloudError> {
        let (_, bw) = self.probe_compute(spec, index, batch)?;
        Ok(BackwardTrace {
            layer_completion_times: spec.workload.exchange_fractions.iter().map(|f| f * bw).collect(),
            total_bw_time: bw,
        })
    }

    /// Ground-truth iteration latencies. `batches[i]` is the local batch of
    /// instance `i`.
    pub fn run_iterations(
        &mut self,
        spec: &CloudSpec,
        profile: &ModelProfile,
        batches: &[u64],
        iters: u32,
    ) -> Result<Vec<f64>, CloudError> {
        if batches.len() != self.instances.len() {
            return Err(CloudError::BatchCount {
                expected: self.instances.len(),
                got: batches.len(),
            });
        }
        let n = self.instances.len() as u32;
        let ids: Vec<String> = self.type_ids().into_iter().map(str::to_string).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let b_cap = id_refs
            .iter()
            .map(|id| spec.get(id).map(|t| t.bus_bandwidth_cap))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let mut out = Vec::with_capacity(iters as usize);
        for _ in 0..iters {
            let (mut t_fw, mut t_bw) = (0.0f64, 0.0f64);
            for (i, &b) in batches.iter().enumerate() {
                let (fw, bw) = self.probe_compute(spec, i, b)?;
                t_fw = t_fw.max(fw);
                t_bw = t_bw.max(bw);
            }
            let t_pe = if n >= 2 {
                let requests: Vec<TransferRequest> = profile
                    .layer_sizes
                    .iter()
                    .zip(&profile.exchange_fractions)
                    .enumerate()
                    .map(|(i, (&s, &f))| TransferRequest {
                        layer_index: i,
                        start: f * t_bw,
                        effective_bytes: effective_bytes(s, n),
                    })
                    .collect();
                let mut rng = self.next_rng("exchange");
                let factor = self.bandwidth_factor;
                run_exchange(
                    &requests,
                    b_cap,
                    |layer, _c| {
                        let noise = temporal(&mut rng, spec.temporal_bw_stddev);
                        spec.mean_bus_bw(&id_refs, factor, profile.layer_sizes[layer])
                            .map(|b| b * noise)
                    },
                    false,
                )?
                .t_pe
            } else {
                0.0
            };
            out.push(t_fw + t_bw.max(t_pe));
        }
        Ok(out)
    }
}

/// Grid of allreduce probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub sizes: Vec<f64>,
    pub world_sizes: Vec<u32>,
    pub allocations: u32,
    pub concurrent_transfers: Vec<u32>,
}

impl Default for ProbeGrid {
    /// Buffers from 4 B to 512 MB in 4x steps, world sizes 2 to 64.
    fn default() -> Self {
        let mut sizes = Vec::new();
        let mut s = 4.0;
        while s <= 512.0 * 1024.0 * 1024.0 {
            sizes.push(s);
            s *= 4.0;
        }
        Self {
            sizes,
            world_sizes: vec![2, 4, 8, 16, 32, 64],
            allocations: 3,
            concurrent_transfers: vec![1],
        }
    }
}

/// Probes every type in `catalog` known to the spec over the grid, drawing a
/// fresh allocation per (allocation index, type).
pub fn grid_probe(
    spec: &CloudSpec,
    catalog: &[VmType],
    grid: &ProbeGrid,
    seed_value: u64,
) -> Result<Vec<(ProbeFeatures, f64)>, CloudError> {
    let mut out = Vec::new();
    let max_n = grid.world_sizes.iter().copied().max().unwrap_or(2);
    for a in 0..grid.allocations {
        let base = seed::derive(seed_value, &format!("alloc/{a}"));
        for vm in catalog.iter().filter(|vm| spec.types.contains_key(&vm.id)) {
            let request = BTreeMap::from([(vm.id.clone(), max_n)]);
            let mut alloc = allocate(spec, &request, seed::derive(base, &vm.id))?;
            for &s in &grid.sizes {
                for &n in &grid.world_sizes {
                    for &c in &grid.concurrent_transfers {
                        let t = alloc.probe_allreduce(spec, s, n, c)?;
                        out.push((ProbeFeatures::for_vm(vm, s, n, c), t));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ProfileRunError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("no catalog type is known to the cloud spec")]
    NoTypes,
}

/// Largest batch the profiler will try when searching for the memory limit.
pub const PROFILE_BATCH_CEILING: u64 = 1 << 16;

/// Profiles the workload on one instance of every catalog type the spec
/// knows: memory-limit search, `replicates` probes per scheduled batch, and a
/// backward trace for the exchange fractions. Types sharing a device kind are
/// profiled once.
pub fn profile_workload(
    spec: &CloudSpec,
    catalog: &[VmType],
    replicates: u32,
    budget: Option<usize>,
    seed_value: u64,
) -> Result<ModelProfile, ProfileRunError> {
    let mut devices: BTreeMap<String, DeviceProbes> = BTreeMap::new();
    let mut trace = None;
    for vm in catalog.iter().filter(|vm| spec.types.contains_key(&vm.id)) {
        if devices.contains_key(&vm.device_kind) {
            continue;
        }
        let b_max = find_max_batch(|b| spec.fits(&vm.id, b).unwrap_or(false), PROFILE_BATCH_CEILING)?;
        let mut alloc = allocate(
            spec,
            &BTreeMap::from([(vm.id.clone(), 1)]),
            seed::derive(seed_value, &format!("profile/{}", vm.id)),
        )?;
        let samples = alloc.profile_compute(spec, 0, &probe_schedule(b_max, budget), replicates)?;
        if trace.is_none() {
            trace = Some(alloc.trace_backward(spec, 0, b_max)?);
        }
        devices.insert(vm.device_kind.clone(), DeviceProbes { samples, b_max });
    }
    let trace = trace.ok_or(ProfileRunError::NoTypes)?;
    Ok(assemble_profile(
        &spec.workload.model_id,
        spec.workload.layer_sizes.clone(),
        &trace,
        &devices,
    )?)
}

/// Request map for a plan-like list of `(type, count)`.
pub fn request_of<'a, I: IntoIterator<Item = (&'a str, u32)>>(entries: I) -> BTreeMap<String, u32> {
    let mut m = BTreeMap::new();
    for (id, c) in entries {
        *m.entry(id.to_string()).or_insert(0) += c;
    }
    m
}
