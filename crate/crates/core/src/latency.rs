//! Piecewise-linear compute latency as a function of local batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("batch {batch} exceeds the device memory limit of {b_max} samples")]
    OutOfMemory { batch: u64, b_max: u64 },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("latency model has no segments")]
    Empty,
    #[error("malformed latency model: {0}")]
    Malformed(String),
}

/// One linear piece `t(B) = alpha * B + beta` valid on `[batch_lo, batch_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub batch_lo: u64,
    pub batch_hi: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl Segment {
    pub fn eval(&self, batch: f64) -> f64 {
        self.alpha * batch + self.beta
    }
}

/// Latency model for one pass (forward or backward) of one network on one
/// device kind. Segments are contiguous, share their boundary batches and
/// cover `[1, b_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLatencyModel {
    pub segments: Vec<Segment>,
    pub b_max: u64,
}

impl PiecewiseLatencyModel {
    /// Single-segment model over `[1, b_max]`.
    pub fn linear(alpha: f64, beta: f64, b_max: u64) -> Self {
        Self {
            segments: vec![Segment {
                batch_lo: 1,
                batch_hi: b_max,
                alpha,
                beta,
            }],
            b_max,
        }
    }

    /// Builds a continuous model through `(batch, latency)` knots sorted by
    /// batch. The first segment is extended down to 1 and the last up to
    /// `b_max`.
    pub fn through_knots(knots: &[(u64, f64)], b_max: u64) -> Result<Self, LatencyError> {
        if knots.len() < 2 {
            return Err(LatencyError::Malformed("need at least two knots".into()));
        }
        let mut segments = Vec::with_capacity(knots.len() - 1);
        for (i, pair) in knots.windows(2).enumerate() {
            let (b0, t0) = pair[0];
            let (b1, t1) = pair[1];
            if b1 <= b0 {
                return Err(LatencyError::Malformed(format!(
                    "knot batches must be strictly increasing ({b0} then {b1})"
                )));
            }
            let alpha = (t1 - t0) / (b1 - b0) as f64;
            let beta = t0 - alpha * b0 as f64;
            let batch_lo = if i == 0 { 1 } else { b0 };
            let batch_hi = if i == knots.len() - 2 { b1.max(b_max) } else { b1 };
            segments.push(Segment {
                batch_lo,
                batch_hi,
                alpha,
                beta,
            });
        }
        let model = Self { segments, b_max };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let first = self.segments.first().ok_or(LatencyError::Empty)?;
        let last = self.segments.last().ok_or(LatencyError::Empty)?;
        if self.b_max == 0 {
            return Err(LatencyError::Malformed("b_max must be at least 1".into()));
        }
        if first.batch_lo > 1 {
            return Err(LatencyError::Malformed("segments must start at batch 1".into()));
        }
        if last.batch_hi < self.b_max {
            return Err(LatencyError::Malformed("segments must reach b_max".into()));
        }
        for s in &self.segments {
            if !(s.alpha.is_finite() && s.beta.is_finite()) || s.alpha < 0.0 {
                return Err(LatencyError::Malformed(format!(
                    "segment [{}, {}] has invalid slope {}",
                    s.batch_lo, s.batch_hi, s.alpha
                )));
            }
            if s.batch_hi < s.batch_lo {
                return Err(LatencyError::Malformed("segment bounds reversed".into()));
            }
        }
        for pair in self.segments.windows(2) {
            if pair[0].batch_hi != pair[1].batch_lo {
                return Err(LatencyError::Malformed(format!(
                    "gap between segments at {} and {}",
                    pair[0].batch_hi, pair[1].batch_lo
                )));
            }
        }
        Ok(())
    }

    /// Predicted latency in seconds at a feasible batch.
    pub fn predict(&self, batch: u64) -> Result<f64, LatencyError> {
        if batch == 0 {
            return Err(LatencyError::ZeroBatch);
        }
        if batch > self.b_max {
            return Err(LatencyError::OutOfMemory {
                batch,
                b_max: self.b_max,
            });
        }
        if self.segments.is_empty() {
            return Err(LatencyError::Empty);
        }
        Ok(self.eval(batch as f64))
    }

    /// Unchecked evaluation; extrapolates with the first or last segment.
    pub fn eval(&self, batch: f64) -> f64 {
        let seg = self
            .segments
            .iter()
            .find(|s| batch <= s.batch_hi as f64)
            .or(self.segments.last())
            .expect("latency model has segments");
        seg.eval(batch)
    }

    /// Segment boundary batches, in increasing order.
    pub fn knots(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self.segments.iter().map(|s| s.batch_lo).collect();
        if let Some(last) = self.segments.last() {
            out.push(last.batch_hi);
        }
        out.dedup();
        out
    }

    /// Same model with every latency multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    alpha: s.alpha * factor,
                    beta: s.beta * factor,
                    ..*s
                })
                .collect(),
            b_max: self.b_max,
        }
    }
}
