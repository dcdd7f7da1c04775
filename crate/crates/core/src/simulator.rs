//! Iteration latency prediction:
//! `t_iter = t_fw + max(t_bw, t_pe)` with compute bounded by the slowest VM
//! and `t_pe` from the exchange kernel driven by predicted bandwidths.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::exchange::{run_exchange, ExchangeTrace, TransferRequest};
use crate::latency::LatencyError;
use crate::netmodel::{effective_bytes, selection_bus_bandwidth, BusBandwidthOracle, NetError};
use crate::seed;
use crate::types::{ModelProfile, Plan, TrainJob, TypeError, VmType};

pub const DEFAULT_SIM_ITERS: u32 = 100;

/// Draws below this fraction of the mean are lifted to it.
pub const TRUNCATION_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("profile incomplete: {0}")]
    ProfileIncomplete(#[from] TypeError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("bandwidth prediction failed for layer {layer}: {source}")]
    Bandwidth {
        layer: usize,
        #[source]
        source: NetError,
    },
    #[error("selection is empty")]
    EmptySelection,
    #[error("iteration count must be at least 1")]
    NoIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub vm_type: VmType,
    pub count: u32,
    pub batch: u64,
}

/// Concrete instances to simulate: counts and local batches per type.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub entries: Vec<SelectionEntry>,
}

impl Selection {
    pub fn new(entries: Vec<SelectionEntry>) -> Self {
        Self { entries }
    }

    /// Resolves a plan against the job's candidate types.
    pub fn from_plan(plan: &Plan, job: &TrainJob) -> Result<Self, TypeError> {
        plan.entries
            .iter()
            .map(|e| {
                let vm = job
                    .vm_type(&e.vm_type_id)
                    .ok_or_else(|| TypeError::UnknownType(e.vm_type_id.clone()))?;
                Ok(SelectionEntry {
                    vm_type: vm.clone(),
                    count: e.count,
                    batch: e.batch,
                })
            })
            .collect::<Result<_, _>>()
            .map(Self::new)
    }

    pub fn world_size(&self) -> u32 {
        self.entries.iter().map(|e| e.count).sum()
    }

    /// `b_cap`: the smallest cap among selected types.
    pub fn bandwidth_cap(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.count > 0)
            .map(|e| e.vm_type.bus_bandwidth_cap)
            .fold(f64::INFINITY, f64::min)
    }

    fn active_types(&self) -> Vec<&VmType> {
        self.entries
            .iter()
            .filter(|e| e.count > 0)
            .map(|e| &e.vm_type)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub t_iter_mean: f64,
    pub t_fw_mean: f64,
    pub t_bw_mean: f64,
    pub t_pe: f64,
    pub per_iteration_latencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeSamples {
    pub fw: Vec<f64>,
    pub bw: Vec<f64>,
}

impl ComputeSamples {
    pub fn fw_mean(&self) -> f64 {
        mean(&self.fw)
    }

    pub fn bw_mean(&self) -> f64 {
        mean(&self.bw)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Maximum of `k` iid truncated normals drawn by inverting the CDF at
/// `u^(1/k)` for a single uniform `u`.
fn max_of_normals(mean: f64, rel_sd: f64, k: u32, u: f64) -> f64 {
    if rel_sd <= 0.0 || k == 0 {
        return mean;
    }
    let p = u.powf(1.0 / k as f64).clamp(1e-12, 1.0 - 1e-12);
    let dist = Normal::new(mean, rel_sd * mean).expect("positive sd");
    dist.inverse_cdf(p).max(TRUNCATION_FRACTION * mean)
}

/// Per-iteration forward and backward latencies, each the max over all VMs.
pub fn sample_compute(
    selection: &Selection,
    profile: &ModelProfile,
    iters: u32,
    seed_value: u64,
) -> Result<ComputeSamples, SimError> {
    if iters == 0 {
        return Err(SimError::NoIterations);
    }
    if selection.world_size() == 0 {
        return Err(SimError::EmptySelection);
    }
    let mut groups = Vec::new();
    for e in selection.entries.iter().filter(|e| e.count > 0) {
        let models = profile.device(&e.vm_type.device_kind)?;
        groups.push((
            models.fw.predict(e.batch)?,
            models.bw.predict(e.batch)?,
            profile.relative_stddev(&e.vm_type.device_kind),
            e.count,
        ));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "sim"));
    let mut out = ComputeSamples {
        fw: Vec::with_capacity(iters as usize),
        bw: Vec::with_capacity(iters as usize),
    };
    for _ in 0..iters {
        let (mut fw, mut bw) = (0.0f64, 0.0f64);
        for &(m_fw, m_bw, sd, count) in &groups {
            let (u_fw, u_bw): (f64, f64) = (rng.random(), rng.random());
            fw = fw.max(max_of_normals(m_fw, sd, count, u_fw));
            bw = bw.max(max_of_normals(m_bw, sd, count, u_bw));
        }
        out.fw.push(fw);
        out.bw.push(bw);
    }
    Ok(out)
}

/// Exchange requests in layer order: start at `fraction * t_bw`, carry the
/// effective bytes of the layer.
pub fn exchange_requests(profile: &ModelProfile, world_size: u32, t_bw: f64) -> Vec<TransferRequest> {
    profile
        .layer_sizes
        .iter()
        .zip(&profile.exchange_fractions)
        .enumerate()
        .map(|(i, (&s, &f))| TransferRequest {
            layer_index: i,
            start: f * t_bw,
            effective_bytes: effective_bytes(s, world_size),
        })
        .collect()
}

/// Full event trace of the exchange phase; empty for a single instance.
pub fn exchange_trace<O: BusBandwidthOracle + ?Sized>(
    profile: &ModelProfile,
    selection: &Selection,
    oracle: &O,
    t_bw: f64,
    record_events: bool,
) -> Result<ExchangeTrace, SimError> {
    let n = selection.world_size();
    if n < 2 {
        return Ok(ExchangeTrace::default());
    }
    let types = selection.active_types();
    let requests = exchange_requests(profile, n, t_bw);
    run_exchange(
        &requests,
        selection.bandwidth_cap(),
        |layer, c| {
            selection_bus_bandwidth(oracle, &types, profile.layer_sizes[layer], n, c)
                .map_err(|source| SimError::Bandwidth { layer, source })
        },
        record_events,
    )
}

pub fn simulate_parameter_exchange<O: BusBandwidthOracle + ?Sized>(
    profile: &ModelProfile,
    selection: &Selection,
    oracle: &O,
    t_bw: f64,
) -> Result<f64, SimError> {
    Ok(exchange_trace(profile, selection, oracle, t_bw, false)?.t_pe)
}

pub fn simulate_iteration<O: BusBandwidthOracle + ?Sized>(
    profile: &ModelProfile,
    selection: &Selection,
    oracle: &O,
    iters: u32,
    seed_value: u64,
) -> Result<SimResult, SimError> {
    let compute = sample_compute(selection, profile, iters, seed_value)?;
    let t_bw_mean = compute.bw_mean();
    let t_pe = simulate_parameter_exchange(profile, selection, oracle, t_bw_mean)?;
    let per_iteration_latencies: Vec<f64> = compute
        .fw
        .iter()
        .zip(&compute.bw)
        .map(|(fw, bw)| fw + bw.max(t_pe))
        .collect();
    Ok(SimResult {
        t_iter_mean: mean(&per_iteration_latencies),
        t_fw_mean: compute.fw_mean(),
        t_bw_mean,
        t_pe,
        per_iteration_latencies,
    })
}

/// Anything the optimizer can ask for a mean iteration latency.
pub trait IterationPredictor: Sync {
    fn predict_t_iter(&self, selection: &Selection) -> Result<f64, SimError>;
}

impl<F> IterationPredictor for F
where
    F: Fn(&Selection) -> Result<f64, SimError> + Sync,
{
    fn predict_t_iter(&self, selection: &Selection) -> Result<f64, SimError> {
        self(selection)
    }
}

/// The simulator bound to a profile and bandwidth oracle.
pub struct Simulator<'a, O: ?Sized> {
    pub profile: &'a ModelProfile,
    pub oracle: &'a O,
    pub iters: u32,
    pub seed: u64,
}

impl<'a, O: BusBandwidthOracle + ?Sized> Simulator<'a, O> {
    pub fn new(profile: &'a ModelProfile, oracle: &'a O, seed: u64) -> Self {
        Self {
            profile,
            oracle,
            iters: DEFAULT_SIM_ITERS,
            seed,
        }
    }

    pub fn run(&self, selection: &Selection) -> Result<SimResult, SimError> {
        simulate_iteration(self.profile, selection, self.oracle, self.iters, self.seed)
    }
}

impl<O: BusBandwidthOracle + ?Sized> IterationPredictor for Simulator<'_, O> {
    fn predict_t_iter(&self, selection: &Selection) -> Result<f64, SimError> {
        Ok(self.run(selection)?.t_iter_mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::PiecewiseLatencyModel;
    use crate::netmodel::ProbeFeatures;
    use crate::types::fixtures::vm;
    use crate::types::PassModels;
    use std::collections::BTreeMap;

    fn profile(sizes: &[f64], fractions: &[f64], sd: f64) -> ModelProfile {
        let mut latency_models = BTreeMap::new();
        latency_models.insert(
            "gpu".to_string(),
            PassModels {
                fw: PiecewiseLatencyModel::linear(0.001, 0.01, 1024),
                bw: PiecewiseLatencyModel::linear(0.002, 0.02, 1024),
            },
        );
        let mut latency_stddev = BTreeMap::new();
        latency_stddev.insert("gpu".to_string(), sd);
        ModelProfile {
            model_id: "m".into(),
            layer_sizes: sizes.to_vec(),
            exchange_fractions: fractions.to_vec(),
            latency_models,
            latency_stddev,
        }
    }

    fn selection(count: u32, batch: u64) -> Selection {
        let mut t = vm("A", 64, 1, 1024, 1.0);
        t.device_kind = "gpu".into();
        Selection::new(vec![SelectionEntry {
            vm_type: t,
            count,
            batch,
        }])
    }

    fn constant(b: f64) -> impl Fn(&ProbeFeatures) -> Result<f64, NetError> + Sync {
        move |_| Ok(b)
    }

    #[test]
    fn single_vm_zero_deviation() {
        let p = profile(&[1e6], &[1.0], 0.0);
        let c = sample_compute(&selection(1, 100), &p, 10, 1).unwrap();
        assert!((c.fw_mean() - 0.11).abs() < 1e-15);
        assert!((c.bw_mean() - 0.22).abs() < 1e-15);
        let c4 = sample_compute(&selection(4, 100), &p, 10, 1).unwrap();
        assert_eq!(c4.fw, c.fw);
    }

    #[test]
    fn world_size_one_has_no_exchange() {
        let p = profile(&[1e9], &[0.0], 0.0);
        let r = simulate_iteration(&p, &selection(1, 100), &constant(1e3), 5, 0).unwrap();
        assert_eq!(r.t_pe, 0.0);
        assert!((r.t_iter_mean - 0.33).abs() < 1e-12);
    }

    #[test]
    fn non_overlapped_single_layer() {
        let s = 1e8;
        let b = 2e9;
        let p = profile(&[s], &[1.0], 0.0);
        let r = simulate_iteration(&p, &selection(4, 100), &constant(b), 3, 0).unwrap();
        let tau = 2.0 * s * 3.0 / (4.0 * b);
        let expected = 0.11 + 0.22 + tau;
        assert!((r.t_iter_mean - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn overlapped_single_layer() {
        let p = profile(&[1e6], &[0.0], 0.0);
        let r = simulate_iteration(&p, &selection(2, 100), &constant(1e9), 3, 0).unwrap();
        assert!(r.t_pe <= r.t_bw_mean);
        assert!((r.t_iter_mean - 0.33).abs() < 1e-12);
    }

    #[test]
    fn slowest_vm_grows_with_world_size() {
        let p = profile(&[1e6], &[1.0], 0.03);
        let mut last = 0.0;
        for n in [1, 2, 4, 8, 16] {
            let c = sample_compute(&selection(n, 100), &p, 200, 9).unwrap();
            assert!(c.fw_mean() >= last);
            last = c.fw_mean();
        }
        assert!(last > 0.11);
    }

    #[test]
    fn missing_device_is_reported() {
        let p = profile(&[1e6], &[1.0], 0.0);
        let mut sel = selection(1, 10);
        sel.entries[0].vm_type.device_kind = "tpu".into();
        assert!(matches!(
            sample_compute(&sel, &p, 1, 0),
            Err(SimError::ProfileIncomplete(TypeError::MissingDevice(_)))
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let p = profile(&[1e6, 2e6], &[0.5, 1.0], 0.05);
        let a = simulate_iteration(&p, &selection(8, 64), &constant(1e9), 50, 3).unwrap();
        let b = simulate_iteration(&p, &selection(8, 64), &constant(1e9), 50, 3).unwrap();
        assert_eq!(a, b);
    }
}
