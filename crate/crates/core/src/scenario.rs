//! A small reference catalog and matching synthetic cloud: a ResNet-50 sized
//! workload on three GPU instance types. Used by the examples, the demo page
//! and the test suites.

use std::collections::BTreeMap;

use crate::cloudsim::{CloudSpec, PreemptionEvent, TrueType, Workload};
use crate::latency::PiecewiseLatencyModel;
use crate::types::{Billing, Catalog, Objective, PassModels, TrainJob, VmType, DEFAULT_MTU};

pub const MODEL_ID: &str = "resnet50-like";

/// Gradient buffers in bytes, in back-propagation order. Every size is a
/// power of four so it lies on the default probe grid.
pub const LAYER_SIZES: [f64; 8] = [
    67_108_864.0,
    16_777_216.0,
    16_777_216.0,
    4_194_304.0,
    1_048_576.0,
    262_144.0,
    65_536.0,
    4_096.0,
];

pub const EXCHANGE_FRACTIONS: [f64; 8] = [0.1, 0.25, 0.4, 0.55, 0.7, 0.8, 0.9, 1.0];

struct Row {
    id: &'static str,
    device: &'static str,
    price: f64,
    billing: Billing,
    quota: u32,
    threshold: u64,
    memcap: u64,
    bus_bw: f64,
    // seconds per sample and fixed seconds, forward pass; backward is twice
    per_sample: f64,
    fixed: f64,
}

const ROWS: [Row; 3] = [
    Row {
        id: "p3.2xlarge",
        device: "v100",
        price: 0.918,
        billing: Billing::Spot,
        quota: 2,
        threshold: 256,
        memcap: 512,
        bus_bw: 1.25e9,
        per_sample: 0.000_15,
        fixed: 0.005,
    },
    Row {
        id: "g3.4xlarge",
        device: "m60",
        price: 1.14,
        billing: Billing::OnDemand,
        quota: 8,
        threshold: 32,
        memcap: 64,
        bus_bw: 1.25e9,
        per_sample: 0.001_2,
        fixed: 0.005,
    },
    Row {
        id: "g4dn.xlarge",
        device: "t4",
        price: 0.526,
        billing: Billing::OnDemand,
        quota: 4,
        threshold: 64,
        memcap: 128,
        bus_bw: 0.625e9,
        per_sample: 0.000_6,
        fixed: 0.005,
    },
];

pub fn catalog() -> Catalog {
    Catalog {
        types: ROWS
            .iter()
            .map(|r| VmType {
                id: r.id.to_string(),
                device_kind: r.device.to_string(),
                price_per_hour: r.price,
                bus_bandwidth_cap: r.bus_bw,
                memcap_batch: r.memcap,
                threshold_batch: r.threshold,
                quota: r.quota,
                billing: r.billing,
                launch_overhead: 150.0,
                region: "us-west-2".into(),
                zone: "us-west-2a".into(),
                placement_group: String::new(),
                cpu_kind: "xeon".into(),
                rated_network: r.bus_bw * 8.0,
            })
            .collect(),
        mtu: DEFAULT_MTU,
    }
}

/// Ground truth for [`catalog`] with the default variance calibration.
pub fn cloud_spec() -> CloudSpec {
    let types: BTreeMap<String, TrueType> = ROWS
        .iter()
        .map(|r| {
            let fw = PiecewiseLatencyModel::linear(r.per_sample, r.fixed, r.memcap);
            let bw = PiecewiseLatencyModel::linear(2.0 * r.per_sample, 2.0 * r.fixed, r.memcap);
            (
                r.id.to_string(),
                TrueType {
                    latency: PassModels { fw, bw },
                    temporal_stddev: 0.02,
                    base_bus_bw: r.bus_bw,
                    bus_bandwidth_cap: r.bus_bw,
                },
            )
        })
        .collect();
    CloudSpec::new(
        types,
        Workload {
            model_id: MODEL_ID.to_string(),
            layer_sizes: LAYER_SIZES.to_vec(),
            exchange_fractions: EXCHANGE_FRACTIONS.to_vec(),
        },
    )
}

/// Two spot V100s against a 500 s limit at minimum cost; one of them is
/// cancelled after half the iterations.
pub fn preemption_job(catalog: &Catalog) -> TrainJob {
    TrainJob {
        profile: MODEL_ID.to_string(),
        global_batch: 1024,
        iterations: 400,
        time_limit: Some(500.0),
        budget: None,
        objective: Objective::MinCost,
        candidate_types: catalog
            .types
            .iter()
            .filter(|t| t.id == "p3.2xlarge" || t.id == "g3.4xlarge")
            .cloned()
            .collect(),
    }
}

pub fn preemption_spec() -> CloudSpec {
    let mut spec = cloud_spec();
    spec.preemptions.push(PreemptionEvent {
        time: 0.0,
        at_iteration: Some(200),
        type_id: "p3.2xlarge".into(),
        count: 1,
    });
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_and_spec_agree() {
        let c = catalog();
        let s = cloud_spec();
        s.validate().unwrap();
        for t in &c.types {
            t.validate().unwrap();
            let truth = s.get(&t.id).unwrap();
            assert_eq!(truth.latency.b_max(), t.memcap_batch);
            assert_eq!(truth.bus_bandwidth_cap, t.bus_bandwidth_cap);
        }
        preemption_job(&c).validate().unwrap();
    }
}
