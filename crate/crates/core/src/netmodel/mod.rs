//! Learned allreduce bandwidth model.
//!
//! Probes are labelled with bus bandwidth `2s(n-1)/(nt)` and two regressors
//! are trained, one for buffers up to the MTU and one above it.

pub mod gbdt;

use std::collections::BTreeMap;
use std::io;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;
use crate::types::{VmType, DEFAULT_MTU};
use gbdt::{Gbdt, GbdtParams, Loss};

/// Lowest bandwidth the model will report, in bytes/second.
pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1000.0;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("allreduce needs at least two participants, got {0}")]
    NoCommunication(u32),
    #[error("{0}")]
    Domain(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("malformed probe csv: {0}")]
    Csv(String),
    #[error("bandwidth prediction failed for layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<NetError>,
    },
}

/// Bus bandwidth of an allreduce of `s` bytes over `n` ranks taking `t` seconds.
pub fn bus_bandwidth(s: f64, n: u32, t: f64) -> Result<f64, NetError> {
    if n < 2 {
        return Err(NetError::NoCommunication(n));
    }
    if !(t > 0.0) {
        return Err(NetError::Domain(format!("allreduce time must be positive, got {t}")));
    }
    if !(s > 0.0) {
        return Err(NetError::Domain(format!("buffer size must be positive, got {s}")));
    }
    Ok(effective_bytes(s, n) / t)
}

/// Allreduce duration implied by a bus bandwidth; inverse of [`bus_bandwidth`].
pub fn allreduce_time(s: f64, n: u32, b_bus: f64) -> Result<f64, NetError> {
    if n < 2 {
        return Err(NetError::NoCommunication(n));
    }
    if !(b_bus > 0.0) {
        return Err(NetError::Domain(format!("bus bandwidth must be positive, got {b_bus}")));
    }
    if !(s >= 0.0) {
        return Err(NetError::Domain(format!("buffer size must be non-negative, got {s}")));
    }
    Ok(effective_bytes(s, n) / b_bus)
}

/// `2s(n-1)/n`: bytes each interface moves during a ring-equivalent allreduce.
pub fn effective_bytes(s: f64, n: u32) -> f64 {
    2.0 * s * (n as f64 - 1.0) / n as f64
}

/// Features of one allreduce measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFeatures {
    pub region: String,
    pub zone: String,
    pub device_kind: String,
    pub cpu_kind: String,
    pub rated_network_bps: f64,
    pub buffer_bytes: f64,
    pub world_size: u32,
    pub concurrent_transfers: u32,
    pub placement_group: bool,
}

impl ProbeFeatures {
    pub fn for_vm(vm: &VmType, buffer_bytes: f64, world_size: u32, concurrent_transfers: u32) -> Self {
        Self {
            region: vm.region.clone(),
            zone: vm.zone.clone(),
            device_kind: vm.device_kind.clone(),
            cpu_kind: vm.cpu_kind.clone(),
            rated_network_bps: vm.rated_network,
            buffer_bytes,
            world_size,
            concurrent_transfers,
            placement_group: vm.in_placement_group(),
        }
    }

    /// Exact identity of the configuration, used to group repeated probes.
    pub fn config_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{:x}|{:x}|{}|{}|{}",
            self.region,
            self.zone,
            self.device_kind,
            self.cpu_kind,
            self.rated_network_bps.to_bits(),
            self.buffer_bytes.to_bits(),
            self.world_size,
            self.concurrent_transfers,
            self.placement_group
        )
    }
}

/// Anything that can answer "what bus bandwidth will this allreduce see".
pub trait BusBandwidthOracle: Sync {
    fn bus_bandwidth(&self, features: &ProbeFeatures) -> Result<f64, NetError>;
}

impl<F> BusBandwidthOracle for F
where
    F: Fn(&ProbeFeatures) -> Result<f64, NetError> + Sync,
{
    fn bus_bandwidth(&self, features: &ProbeFeatures) -> Result<f64, NetError> {
        self(features)
    }
}

/// Bandwidth of a mixed selection: the slowest type's prediction.
pub fn selection_bus_bandwidth<O: BusBandwidthOracle + ?Sized>(
    oracle: &O,
    types: &[&VmType],
    buffer_bytes: f64,
    world_size: u32,
    concurrent: u32,
) -> Result<f64, NetError> {
    let mut best = f64::INFINITY;
    for vm in types {
        let b = oracle.bus_bandwidth(&ProbeFeatures::for_vm(vm, buffer_bytes, world_size, concurrent))?;
        best = best.min(b);
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(NetError::Domain("no instance types in selection".into()))
    }
}

/// A labelled measurement. Repeated observations of one configuration stay
/// separate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    #[serde(flatten)]
    pub features: ProbeFeatures,
    pub measured_time: f64,
    pub bus_bw: f64,
    /// Staleness used for weight decay when retraining; 0 for fresh probes.
    #[serde(default)]
    pub age: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ProbeRecord>,
    pub skipped: usize,
}

/// Attaches bus-bandwidth labels. Invalid rows are dropped and counted; valid
/// rows are kept one-to-one, never averaged.
pub fn build_dataset(raw: &[(ProbeFeatures, f64)]) -> Dataset {
    let mut out = Dataset::default();
    for (features, t) in raw {
        match bus_bandwidth(features.buffer_bytes, features.world_size, *t) {
            Ok(bus_bw) if features.buffer_bytes >= 4.0 => out.records.push(ProbeRecord {
                features: features.clone(),
                measured_time: *t,
                bus_bw,
                age: 0.0,
            }),
            _ => out.skipped += 1,
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeRow {
    region: String,
    zone: String,
    device_kind: String,
    cpu_kind: String,
    rated_network_bps: f64,
    buffer_bytes: f64,
    world_size: u32,
    concurrent_transfers: u32,
    placement_group: bool,
    time_s: f64,
}

pub const PROBE_CSV_VERSION_LINE: &str = "# hetplan-probes v1";

/// Writes raw probes; the first line is a versioned comment.
pub fn write_probes_csv<W: io::Write>(mut writer: W, probes: &[(ProbeFeatures, f64)]) -> Result<(), NetError> {
    writeln!(writer, "{PROBE_CSV_VERSION_LINE}").map_err(|e| NetError::Csv(e.to_string()))?;
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record([
        "region",
        "zone",
        "device_kind",
        "cpu_kind",
        "rated_network_bps",
        "buffer_bytes",
        "world_size",
        "concurrent_transfers",
        "placement_group",
        "time_s",
    ])
    .map_err(|e| NetError::Csv(e.to_string()))?;
    for (f, t) in probes {
        wtr.serialize(ProbeRow {
            region: f.region.clone(),
            zone: f.zone.clone(),
            device_kind: f.device_kind.clone(),
            cpu_kind: f.cpu_kind.clone(),
            rated_network_bps: f.rated_network_bps,
            buffer_bytes: f.buffer_bytes,
            world_size: f.world_size,
            concurrent_transfers: f.concurrent_transfers,
            placement_group: f.placement_group,
            time_s: *t,
        })
        .map_err(|e| NetError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| NetError::Csv(e.to_string()))
}

pub fn read_probes_csv<R: io::Read>(reader: R) -> Result<Vec<(ProbeFeatures, f64)>, NetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    rdr.deserialize::<ProbeRow>()
        .map(|row| {
            let r = row.map_err(|e| NetError::Csv(e.to_string()))?;
            Ok((
                ProbeFeatures {
                    region: r.region,
                    zone: r.zone,
                    device_kind: r.device_kind,
                    cpu_kind: r.cpu_kind,
                    rated_network_bps: r.rated_network_bps,
                    buffer_bytes: r.buffer_bytes,
                    world_size: r.world_size,
                    concurrent_transfers: r.concurrent_transfers,
                    placement_group: r.placement_group,
                },
                r.time_s,
            ))
        })
        .collect()
}

/// Categorical vocabularies. Code 0 is reserved for values never seen in
/// training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoding {
    pub region: Vec<String>,
    pub zone: Vec<String>,
    pub device_kind: Vec<String>,
    pub cpu_kind: Vec<String>,
}

pub const FEATURE_NAMES: [&str; 9] = [
    "region",
    "zone",
    "device_kind",
    "cpu_kind",
    "log2_rated_network_bps",
    "log2_buffer_bytes",
    "log2_world_size",
    "concurrent_transfers",
    "placement_group",
];

fn vocab<'a, I: Iterator<Item = &'a str>>(values: I) -> Vec<String> {
    let mut v: Vec<String> = values.map(str::to_string).collect();
    v.sort();
    v.dedup();
    v
}

fn code(vocab: &[String], value: &str) -> f64 {
    vocab
        .binary_search_by(|v| v.as_str().cmp(value))
        .map_or(0.0, |i| (i + 1) as f64)
}

impl FeatureEncoding {
    pub fn fit(records: &[ProbeRecord]) -> Self {
        Self {
            region: vocab(records.iter().map(|r| r.features.region.as_str())),
            zone: vocab(records.iter().map(|r| r.features.zone.as_str())),
            device_kind: vocab(records.iter().map(|r| r.features.device_kind.as_str())),
            cpu_kind: vocab(records.iter().map(|r| r.features.cpu_kind.as_str())),
        }
    }

    pub fn encode(&self, f: &ProbeFeatures) -> Vec<f64> {
        vec![
            code(&self.region, &f.region),
            code(&self.zone, &f.zone),
            code(&self.device_kind, &f.device_kind),
            code(&self.cpu_kind, &f.cpu_kind),
            (f.rated_network_bps.max(0.0) + 1.0).log2(),
            f.buffer_bytes.max(1.0).log2(),
            (f.world_size.max(1) as f64).log2(),
            f.concurrent_transfers as f64,
            if f.placement_group { 1.0 } else { 0.0 },
        ]
    }
}

/// Space the regressors are trained in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    /// Predict `ln(bus_bw)`; raw predictions are always positive.
    Log,
    /// Predict bus bandwidth directly; raw predictions may be negative.
    Linear,
}

impl TargetTransform {
    fn forward(self, bw: f64) -> f64 {
        match self {
            TargetTransform::Log => bw.ln(),
            TargetTransform::Linear => bw,
        }
    }

    fn inverse(self, y: f64) -> f64 {
        match self {
            TargetTransform::Log => y.exp(),
            TargetTransform::Linear => y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    Gbdt(Gbdt),
    /// Used when one side of the MTU split had no training rows.
    NearestNeighbor {
        points: Vec<NnPoint>,
    },
}

impl Regressor {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::Gbdt(m) => m.predict(x),
            Regressor::NearestNeighbor { points } => {
                let mut best = (f64::INFINITY, 0.0);
                for p in points {
                    let d: f64 = p.x.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, p.y);
                    }
                }
                best.1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mtu: f64,
    pub floor: f64,
    pub target: TargetTransform,
    /// Candidate hyperparameters; the one with the lowest held-out MAPE wins.
    pub grid: Vec<GbdtParams>,
    pub holdout_fraction: f64,
    /// Weight of a record is `exp(-decay_rate * age)`.
    pub decay_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let base = GbdtParams::default();
        let grid = [4usize, 8]
            .into_iter()
            .flat_map(|max_depth| {
                [Loss::Squared, Loss::PseudoHuber { delta: 0.1 }]
                    .into_iter()
                    .map(move |loss| GbdtParams {
                        max_depth,
                        loss,
                        ..base
                    })
            })
            .collect();
        Self {
            mtu: DEFAULT_MTU,
            floor: DEFAULT_BANDWIDTH_FLOOR,
            target: TargetTransform::Log,
            grid,
            holdout_fraction: 0.2,
            decay_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutotuneEntry {
    pub split: String,
    pub params: GbdtParams,
    pub holdout_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub version: u32,
    pub dataset_hash: String,
    pub rows_small: usize,
    pub rows_large: usize,
    pub small_params: Option<GbdtParams>,
    pub large_params: Option<GbdtParams>,
    pub small_fallback: bool,
    pub large_fallback: bool,
    pub decay_rate: f64,
    pub seed: u64,
    pub autotune: Vec<AutotuneEntry>,
}

/// Trained MTU-split bandwidth model. Immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    pub small_model: Regressor,
    pub large_model: Regressor,
    pub mtu: f64,
    pub floor: f64,
    pub target: TargetTransform,
    pub feature_encoding: FeatureEncoding,
    pub training_metadata: TrainingMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthPrediction {
    pub bytes_per_second: f64,
    /// Regressor output before the floor clamp.
    pub raw: f64,
    pub clamped: bool,
    pub used_small_model: bool,
}

fn dataset_hash(records: &[ProbeRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.features.config_key().as_bytes());
        h.update(r.measured_time.to_bits().to_le_bytes());
        h.update(r.age.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn mape_of(pred: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len().max(1) as f64;
    pred.iter().zip(labels).map(|(p, y)| (p - y).abs() / y).sum::<f64>() / n * 100.0
}

struct Side<'a> {
    name: &'static str,
    rows: Vec<&'a ProbeRecord>,
}

fn train_side(
    side: &Side<'_>,
    encoding: &FeatureEncoding,
    config: &TrainConfig,
    autotune: &mut Vec<AutotuneEntry>,
) -> Option<(Gbdt, GbdtParams)> {
    if side.rows.is_empty() {
        return None;
    }
    let x: Vec<Vec<f64>> = side.rows.iter().map(|r| encoding.encode(&r.features)).collect();
    let y: Vec<f64> = side.rows.iter().map(|r| config.target.forward(r.bus_bw)).collect();
    let w: Vec<f64> = side.rows.iter().map(|r| (-config.decay_rate * r.age).exp()).collect();
    let grid: Vec<GbdtParams> = if config.grid.is_empty() {
        vec![GbdtParams::default()]
    } else {
        config.grid.clone()
    };

    let mut chosen = grid[0];
    let n_hold = ((side.rows.len() as f64) * config.holdout_fraction).floor() as usize;
    if grid.len() > 1 && n_hold >= 1 && side.rows.len() - n_hold >= 1 {
        let mut idx: Vec<usize> = (0..side.rows.len()).collect();
        idx.shuffle(&mut seed::rng(seed::derive(config.seed, side.name)));
        let (hold, train) = idx.split_at(n_hold);
        let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
            (
                ids.iter().map(|&i| x[i].clone()).collect(),
                ids.iter().map(|&i| y[i]).collect(),
                ids.iter().map(|&i| w[i]).collect(),
            )
        };
        let (tx, ty, tw) = pick(train);
        let labels: Vec<f64> = hold.iter().map(|&i| side.rows[i].bus_bw).collect();
        let mut best = f64::INFINITY;
        for params in &grid {
            let m = gbdt::fit(&tx, &ty, &tw, params);
            let pred: Vec<f64> = hold
                .iter()
                .map(|&i| config.target.inverse(m.predict(&x[i])).max(config.floor))
                .collect();
            let score = mape_of(&pred, &labels);
            autotune.push(AutotuneEntry {
                split: side.name.to_string(),
                params: *params,
                holdout_mape: score,
            });
            if score < best {
                best = score;
                chosen = *params;
            }
        }
    }
    Some((gbdt::fit(&x, &y, &w, &chosen), chosen))
}

fn nearest_neighbor(rows: &[&ProbeRecord], encoding: &FeatureEncoding, target: TargetTransform) -> Regressor {
    Regressor::NearestNeighbor {
        points: rows
            .iter()
            .map(|r| NnPoint {
                x: encoding.encode(&r.features),
                y: target.forward(r.bus_bw),
            })
            .collect(),
    }
}

/// Trains the MTU-split model. Deterministic given dataset order, config and
/// seed.
pub fn train_model(dataset: &[ProbeRecord], config: &TrainConfig) -> Result<BandwidthModel, NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let encoding = FeatureEncoding::fit(dataset);
    let small = Side {
        name: "small",
        rows: dataset
            .iter()
            .filter(|r| r.features.buffer_bytes <= config.mtu)
            .collect(),
    };
    let large = Side {
        name: "large",
        rows: dataset
            .iter()
            .filter(|r| r.features.buffer_bytes > config.mtu)
            .collect(),
    };
    let mut autotune = Vec::new();
    let small_fit = train_side(&small, &encoding, config, &mut autotune);
    let large_fit = train_side(&large, &encoding, config, &mut autotune);

    let metadata = TrainingMetadata {
        version: ARTIFACT_VERSION,
        dataset_hash: dataset_hash(dataset),
        rows_small: small.rows.len(),
        rows_large: large.rows.len(),
        small_params: small_fit.as_ref().map(|(_, p)| *p),
        large_params: large_fit.as_ref().map(|(_, p)| *p),
        small_fallback: small_fit.is_none(),
        large_fallback: large_fit.is_none(),
        decay_rate: config.decay_rate,
        seed: config.seed,
        autotune,
    };
    let small_model = match small_fit {
        Some((m, _)) => Regressor::Gbdt(m),
        None => nearest_neighbor(&large.rows, &encoding, config.target),
    };
    let large_model = match large_fit {
        Some((m, _)) => Regressor::Gbdt(m),
        None => nearest_neighbor(&small.rows, &encoding, config.target),
    };
    Ok(BandwidthModel {
        small_model,
        large_model,
        mtu: config.mtu,
        floor: config.floor,
        target: config.target,
        feature_encoding: encoding,
        training_metadata: metadata,
    })
}

impl BandwidthModel {
    pub fn predict_detailed(&self, features: &ProbeFeatures) -> Result<BandwidthPrediction, NetError> {
        if features.world_size < 2 {
            return Err(NetError::NoCommunication(features.world_size));
        }
        let x = self.feature_encoding.encode(features);
        let used_small_model = features.buffer_bytes <= self.mtu;
        let regressor = if used_small_model {
            &self.small_model
        } else {
            &self.large_model
        };
        let raw = self.target.inverse(regressor.predict(&x));
        let clamped = !(raw >= self.floor);
        Ok(BandwidthPrediction {
            bytes_per_second: if clamped { self.floor } else { raw },
            raw,
            clamped,
            used_small_model,
        })
    }

    pub fn predict_bus_bw(&self, features: &ProbeFeatures) -> Result<f64, NetError> {
        Ok(self.predict_detailed(features)?.bytes_per_second)
    }
}

impl BusBandwidthOracle for BandwidthModel {
    fn bus_bandwidth(&self, features: &ProbeFeatures) -> Result<f64, NetError> {
        self.predict_bus_bw(features)
    }
}

/// Mean absolute percentage error of `model` on `testset`, in percent.
pub fn evaluate_mape<O: BusBandwidthOracle + ?Sized>(model: &O, testset: &[ProbeRecord]) -> Result<f64, NetError> {
    if testset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let mut pred = Vec::with_capacity(testset.len());
    for r in testset {
        pred.push(model.bus_bandwidth(&r.features)?);
    }
    let labels: Vec<f64> = testset.iter().map(|r| r.bus_bw).collect();
    Ok(mape_of(&pred, &labels))
}

fn group_labels(records: &[ProbeRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.features.config_key()).or_default().push(r.bus_bw);
    }
    groups
}

/// MAPE obtained by predicting each configuration's mean label.
pub fn mean_prediction_mape(records: &[ProbeRecord]) -> f64 {
    let groups = group_labels(records);
    let total: f64 = groups
        .values()
        .map(|ys| {
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            ys.iter().map(|y| (m - y).abs() / y).sum::<f64>()
        })
        .sum();
    total / records.len().max(1) as f64 * 100.0
}

/// Lowest MAPE any function of the features can reach: each configuration
/// gets the constant minimizing its absolute percentage error. The objective
/// is convex and piecewise linear with kinks at the labels, so the minimum
/// sits on a label.
pub fn irreducible_mape(records: &[ProbeRecord]) -> f64 {
    let groups = group_labels(records);
    let total: f64 = groups
        .values()
        .map(|ys| {
            ys.iter()
                .map(|c| ys.iter().map(|y| (c - y).abs() / y).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / records.len().max(1) as f64 * 100.0
}
