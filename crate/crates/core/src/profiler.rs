//! Compute-latency profiling: memory-limit search, piecewise latency fits,
//! efficiency thresholds, latency deviation and gradient exchange timestamps.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latency::{LatencyError, PiecewiseLatencyModel};
use crate::types::{ModelProfile, PassModels, TypeError};

/// Throughput fraction of the best probed batch that counts as efficient.
pub const DEFAULT_THRESHOLD_CUTOFF: f64 = 0.9;

/// Number of distinct probe batches per device.
pub const DEFAULT_PROBE_BUDGET: usize = 4;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("model does not fit on device even at batch 1")]
    DoesNotFit,
    #[error("degenerate fit: need samples at two or more distinct batch sizes")]
    Degenerate,
    #[error("invalid sample at batch {batch}: {reason}")]
    InvalidSample { batch: u64, reason: String },
    #[error("probe batch {batch} exceeds b_max {b_max}")]
    ProbeAboveMax { batch: u64, b_max: u64 },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("malformed sample csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Fw,
    Bw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub batch: u64,
    pub fw_latency: f64,
    pub bw_latency: f64,
    pub replicate_index: u32,
}

impl LatencySample {
    pub fn latency(&self, pass: Pass) -> f64 {
        match pass {
            Pass::Fw => self.fw_latency,
            Pass::Bw => self.bw_latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardTrace {
    /// Seconds from backward-pass start until each layer's gradient is ready,
    /// in back-propagation order.
    pub layer_completion_times: Vec<f64>,
    pub total_bw_time: f64,
}

/// Largest batch in `1..=upper_bound` for which `fits` holds, assuming `fits`
/// is monotone. Issues at most `2 + log2(upper_bound)` probes.
pub fn find_max_batch<F>(mut fits: F, upper_bound: u64) -> Result<u64, ProfileError>
where
    F: FnMut(u64) -> bool,
{
    let upper_bound = upper_bound.max(1);
    if !fits(1) {
        return Err(ProfileError::DoesNotFit);
    }
    if fits(upper_bound) {
        return Ok(upper_bound);
    }
    let (mut lo, mut hi) = (1u64, upper_bound);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Power-of-two probe batches up to `b_max`. With a budget, down-selects to
/// `{1, b_max/4, b_max/2, b_max}` (deduplicated, `b_max` kept even when it is
/// not a power of two).
pub fn probe_schedule(b_max: u64, budget: Option<usize>) -> Vec<u64> {
    let b_max = b_max.max(1);
    let mut all: Vec<u64> = std::iter::successors(Some(1u64), |b| b.checked_mul(2))
        .take_while(|b| *b <= b_max)
        .collect();
    if *all.last().unwrap() != b_max {
        all.push(b_max);
    }
    match budget {
        Some(n) if all.len() > n => {
            let mut picked = vec![1, b_max / 4, b_max / 2, b_max];
            picked.retain(|b| *b >= 1);
            picked.sort_unstable();
            picked.dedup();
            picked.truncate(n.max(2));
            picked
        }
        _ => all,
    }
}

fn group_by_batch(samples: &[LatencySample], pass: Pass) -> Result<BTreeMap<u64, Vec<f64>>, ProfileError> {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in samples {
        if s.batch < 1 {
            return Err(ProfileError::InvalidSample {
                batch: s.batch,
                reason: "batch must be at least 1".into(),
            });
        }
        let t = s.latency(pass);
        if !(t > 0.0 && t.is_finite()) {
            return Err(ProfileError::InvalidSample {
                batch: s.batch,
                reason: format!("latency {t} must be positive"),
            });
        }
        groups.entry(s.batch).or_default().push(t);
    }
    Ok(groups)
}

/// Weighted pool-adjacent-violators: the closest non-decreasing sequence in
/// weighted least squares. Leaves already-monotone input untouched.
fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // (value, weight, span)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (v1, w1, n1) = blocks.pop().unwrap();
            let (v0, w0, n0) = blocks.pop().unwrap();
            blocks.push(((v0 * w0 + v1 * w1) / (w0 + w1), w0 + w1, n0 + n1));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, _, n)| std::iter::repeat(v).take(n))
        .collect()
}

/// Fits a continuous piecewise-linear latency model with one segment per
/// pair of adjacent probed batches.
///
/// The least-squares line through replicates at two batch values passes
/// through the per-batch means, so each segment joins adjacent means. Means
/// that would make latency decrease with batch are pooled first.
pub fn fit_latency_model(
    samples: &[LatencySample],
    pass: Pass,
    b_max: u64,
) -> Result<PiecewiseLatencyModel, ProfileError> {
    let groups = group_by_batch(samples, pass)?;
    if groups.len() < 2 {
        return Err(ProfileError::Degenerate);
    }
    if let Some((&batch, _)) = groups.iter().next_back().filter(|(b, _)| **b > b_max) {
        return Err(ProfileError::ProbeAboveMax { batch, b_max });
    }
    let batches: Vec<u64> = groups.keys().copied().collect();
    let means: Vec<f64> = groups
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let weights: Vec<f64> = groups.values().map(|v| v.len() as f64).collect();
    let fitted = isotonic(&means, &weights);
    let knots: Vec<(u64, f64)> = batches.into_iter().zip(fitted).collect();
    Ok(PiecewiseLatencyModel::through_knots(&knots, b_max)?)
}

pub fn predict_latency(model: &PiecewiseLatencyModel, batch: u64) -> Result<f64, LatencyError> {
    model.predict(batch)
}

fn threshold_over<F: Fn(u64) -> f64>(knots: &[u64], latency: F, cutoff: f64) -> u64 {
    let throughput: Vec<(u64, f64)> = knots
        .iter()
        .map(|&b| {
            let t = latency(b);
            (b, if t > 0.0 { b as f64 / t } else { 0.0 })
        })
        .collect();
    let best = throughput.iter().map(|(_, x)| *x).fold(0.0, f64::max);
    throughput
        .iter()
        .find(|(_, x)| *x >= cutoff * best)
        .or(throughput.first())
        .map(|(b, _)| *b)
        .unwrap_or(1)
}

/// Smallest knot batch whose throughput reaches `cutoff` of the best knot
/// throughput.
pub fn find_threshold_batch(model: &PiecewiseLatencyModel, cutoff: f64) -> u64 {
    threshold_over(&model.knots(), |b| model.eval(b as f64), cutoff)
}

/// Same rule over whole-iteration compute latency (forward + backward).
pub fn find_device_threshold(models: &PassModels, cutoff: f64) -> u64 {
    let mut knots = models.fw.knots();
    knots.extend(models.bw.knots());
    knots.retain(|b| *b <= models.b_max());
    knots.sort_unstable();
    knots.dedup();
    threshold_over(&knots, |b| models.fw.eval(b as f64) + models.bw.eval(b as f64), cutoff)
}

/// Normalizes layer completion times by the total backward time. Order is
/// preserved, so reordered allreduce schedules stay reordered.
pub fn extract_exchange_fractions(trace: &BackwardTrace) -> Result<Vec<f64>, ProfileError> {
    if !(trace.total_bw_time > 0.0 && trace.total_bw_time.is_finite()) {
        return Err(ProfileError::MalformedTrace(
            "total backward time must be positive".into(),
        ));
    }
    trace
        .layer_completion_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t < 0.0 || !t.is_finite() {
                Err(ProfileError::MalformedTrace(format!(
                    "layer {i} has completion time {t}"
                )))
            } else {
                Ok((t / trace.total_bw_time).clamp(0.0, 1.0))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub relative: f64,
    /// Set when no probed batch had two or more replicates.
    pub insufficient_replicates: bool,
}

/// Relative deviation of compute latency (forward + backward), pooled over
/// probed batches: `sqrt(sum (n_k - 1) cv_k^2 / sum (n_k - 1))` where `cv_k`
/// is the sample standard deviation over the mean at batch `k`.
pub fn estimate_stddev(samples: &[LatencySample]) -> DeviationEstimate {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.batch).or_default().push(s.fw_latency + s.bw_latency);
    }
    let mut num = 0.0;
    let mut dof = 0usize;
    for v in groups.values().filter(|v| v.len() >= 2) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        num += (n - 1.0) * var / (mean * mean);
        dof += v.len() - 1;
    }
    if dof == 0 {
        return DeviationEstimate {
            relative: 0.0,
            insufficient_replicates: true,
        };
    }
    DeviationEstimate {
        relative: (num / dof as f64).sqrt(),
        insufficient_replicates: false,
    }
}

/// Probe results for one device kind.
#[derive(Debug, Clone)]
pub struct DeviceProbes {
    pub samples: Vec<LatencySample>,
    pub b_max: u64,
}

/// Builds a [`ModelProfile`] from per-device probes and one backward trace.
pub fn assemble_profile(
    model_id: &str,
    layer_sizes: Vec<f64>,
    trace: &BackwardTrace,
    devices: &BTreeMap<String, DeviceProbes>,
) -> Result<ModelProfile, ProfileError> {
    let exchange_fractions = extract_exchange_fractions(trace)?;
    let mut latency_models = BTreeMap::new();
    let mut latency_stddev = BTreeMap::new();
    for (kind, probes) in devices {
        let fw = fit_latency_model(&probes.samples, Pass::Fw, probes.b_max)?;
        let bw = fit_latency_model(&probes.samples, Pass::Bw, probes.b_max)?;
        latency_models.insert(kind.clone(), PassModels { fw, bw });
        latency_stddev.insert(kind.clone(), estimate_stddev(&probes.samples).relative);
    }
    let profile = ModelProfile {
        model_id: model_id.to_string(),
        layer_sizes,
        exchange_fractions,
        latency_models,
        latency_stddev,
    };
    profile.validate()?;
    Ok(profile)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    batch: u64,
    pass: Pass,
    latency_s: f64,
    replicate: u32,
}

/// Reads probe samples in the `batch,pass,latency_s,replicate` format; the
/// forward and backward rows of one `(batch, replicate)` are joined.
pub fn read_samples_csv<R: io::Read>(reader: R) -> Result<Vec<LatencySample>, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut joined: BTreeMap<(u64, u32), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for row in rdr.deserialize::<SampleRow>() {
        let row = row.map_err(|e| ProfileError::Csv(e.to_string()))?;
        let slot = joined.entry((row.batch, row.replicate)).or_default();
        match row.pass {
            Pass::Fw => slot.0 = Some(row.latency_s),
            Pass::Bw => slot.1 = Some(row.latency_s),
        }
    }
    joined
        .into_iter()
        .map(|((batch, replicate_index), pair)| match pair {
            (Some(fw_latency), Some(bw_latency)) => Ok(LatencySample {
                batch,
                fw_latency,
                bw_latency,
                replicate_index,
            }),
            _ => Err(ProfileError::Csv(format!(
                "batch {batch} replicate {replicate_index} lacks a forward or backward row"
            ))),
        })
        .collect()
}

pub fn write_samples_csv<W: io::Write>(writer: W, samples: &[LatencySample]) -> Result<(), ProfileError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        for pass in [Pass::Fw, Pass::Bw] {
            wtr.serialize(SampleRow {
                batch: s.batch,
                pass,
                latency_s: s.latency(pass),
                replicate: s.replicate_index,
            })
            .map_err(|e| ProfileError::Csv(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| ProfileError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(batch: u64, t: f64) -> LatencySample {
        LatencySample {
            batch,
            fw_latency: t,
            bw_latency: t,
            replicate_index: 0,
        }
    }

    fn linear_scan<F: Fn(u64) -> bool>(fits: F, upper: u64) -> u64 {
        (1..=upper).filter(|b| fits(*b)).max().unwrap_or(0)
    }

    #[test]
    fn max_batch_matches_linear_scan() {
        let fits = |b: u64| b <= 137;
        assert_eq!(linear_scan(fits, 1024), 137);
        let mut calls = 0;
        let got = find_max_batch(
            |b| {
                calls += 1;
                fits(b)
            },
            1024,
        )
        .unwrap();
        assert_eq!(got, 137);
        assert!(calls <= 2 + 10);
    }

    #[test]
    fn max_batch_edges() {
        assert_eq!(find_max_batch(|_| true, 512).unwrap(), 512);
        assert_eq!(find_max_batch(|b| b <= 1, 1024).unwrap(), 1);
        assert!(matches!(find_max_batch(|_| false, 1024), Err(ProfileError::DoesNotFit)));
    }

    #[test]
    fn collinear_fit_is_exact() {
        let s = [sample(1, 3.0), sample(2, 5.0), sample(4, 9.0)];
        let m = fit_latency_model(&s, Pass::Fw, 8).unwrap();
        for seg in &m.segments {
            assert!((seg.alpha - 2.0).abs() < 1e-12);
            assert!((seg.beta - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_slope_fit() {
        let s = [sample(1, 10.0), sample(64, 12.0), sample(128, 20.0), sample(256, 36.0)];
        let m = fit_latency_model(&s, Pass::Bw, 256).unwrap();
        // closed-form two-point slopes
        assert!((m.segments[0].alpha - 2.0 / 63.0).abs() < 1e-12);
        assert!((m.segments[1].alpha - 0.125).abs() < 1e-12);
        assert!((m.segments[2].alpha - 0.125).abs() < 1e-12);
        assert_eq!(m.segments[0].batch_hi, 64);
    }

    #[test]
    fn replicates_fit_like_their_means() {
        let noisy = [
            sample(1, 1.0),
            sample(1, 1.4),
            sample(16, 3.0),
            sample(16, 3.3),
            sample(16, 2.7),
            sample(64, 8.0),
            sample(64, 8.6),
        ];
        let means = [sample(1, 1.2), sample(16, 3.0), sample(64, 8.3)];
        let a = fit_latency_model(&noisy, Pass::Fw, 64).unwrap();
        let b = fit_latency_model(&means, Pass::Fw, 64).unwrap();
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert!((x.alpha - y.alpha).abs() < 1e-12);
            assert!((x.beta - y.beta).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_fit() {
        let s = [sample(8, 1.0), sample(8, 1.1)];
        assert!(matches!(
            fit_latency_model(&s, Pass::Fw, 8),
            Err(ProfileError::Degenerate)
        ));
    }

    #[test]
    fn decreasing_means_are_pooled() {
        let s = [sample(1, 2.0), sample(2, 1.5), sample(4, 3.0)];
        let m = fit_latency_model(&s, Pass::Fw, 4).unwrap();
        assert!(m.segments.iter().all(|seg| seg.alpha >= 0.0));
    }

    #[test]
    fn threshold_at_the_knee() {
        // flat until 64, proportional after
        let m = PiecewiseLatencyModel::through_knots(&[(1, 1.0), (16, 1.0), (64, 1.0), (256, 4.0)], 256).unwrap();
        let by_enumeration = m
            .knots()
            .into_iter()
            .find(|&b| b as f64 / m.eval(b as f64) >= 0.9 * 64.0)
            .unwrap();
        assert_eq!(by_enumeration, 64);
        assert_eq!(find_threshold_batch(&m, DEFAULT_THRESHOLD_CUTOFF), 64);
    }

    #[test]
    fn threshold_of_proportional_model_is_smallest() {
        let m = PiecewiseLatencyModel::through_knots(&[(1, 0.5), (8, 4.0), (32, 16.0)], 32).unwrap();
        assert_eq!(find_threshold_batch(&m, DEFAULT_THRESHOLD_CUTOFF), 1);
    }

    #[test]
    fn fractions() {
        let t = BackwardTrace {
            layer_completion_times: vec![0.2, 0.6, 1.0],
            total_bw_time: 1.0,
        };
        assert_eq!(extract_exchange_fractions(&t).unwrap(), vec![0.2, 0.6, 1.0]);
        let t = BackwardTrace {
            layer_completion_times: vec![1.0, 3.0, 4.0],
            total_bw_time: 4.0,
        };
        assert_eq!(extract_exchange_fractions(&t).unwrap(), vec![0.25, 0.75, 1.0]);
        let reordered = BackwardTrace {
            layer_completion_times: vec![1.0, 3.0, 2.0],
            total_bw_time: 4.0,
        };
        assert_eq!(extract_exchange_fractions(&reordered).unwrap(), vec![0.25, 0.75, 0.5]);
        let bad = BackwardTrace {
            layer_completion_times: vec![-1.0],
            total_bw_time: 4.0,
        };
        assert!(extract_exchange_fractions(&bad).is_err());
    }

    #[test]
    fn deviation() {
        let same = [sample(4, 1.0), sample(4, 1.0), sample(8, 2.0), sample(8, 2.0)];
        assert_eq!(estimate_stddev(&same).relative, 0.0);
        // fw + bw = 2x, so use half values: totals 9, 10, 11
        let spread = [sample(4, 4.5), sample(4, 5.0), sample(4, 5.5)];
        assert!((estimate_stddev(&spread).relative - 0.1).abs() < 1e-12);
        let single = [sample(4, 4.5), sample(8, 5.0)];
        let est = estimate_stddev(&single);
        assert_eq!(est.relative, 0.0);
        assert!(est.insufficient_replicates);
    }

    #[test]
    fn schedule() {
        assert_eq!(probe_schedule(256, Some(4)), vec![1, 64, 128, 256]);
        assert_eq!(probe_schedule(8, None), vec![1, 2, 4, 8]);
        assert_eq!(probe_schedule(4, Some(4)), vec![1, 2, 4]);
        assert_eq!(probe_schedule(100, None).last(), Some(&100));
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![
            LatencySample {
                batch: 4,
                fw_latency: 0.1,
                bw_latency: 0.2,
                replicate_index: 0,
            },
            LatencySample {
                batch: 8,
                fw_latency: 0.15,
                bw_latency: 0.3,
                replicate_index: 1,
            },
        ];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("batch,pass,latency_s,replicate\n4,fw,0.1,0\n"));
        assert_eq!(read_samples_csv(&buf[..]).unwrap(), s);
    }
}
