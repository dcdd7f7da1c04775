//! Event-queue kernel for overlapped gradient exchange.
//!
//! Transfers start at fixed times and drain "effective bytes"
//! (`2s(n-1)/n`) at their current rate. Whenever a transfer starts or
//! finishes, every active rate is re-shared:
//!
//! ```text
//! b_tra = b_bus                  if b_agg < b_cap
//! b_tra = min(b_bus, b_cap / c)  otherwise
//! ```
//!
//! where `b_agg` is the sum of active predicted bandwidths and `c` the number
//! of active transfers. Completions at a timestamp are handled before starts
//! at the same timestamp; ties go to the lower layer index.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRequest {
    pub layer_index: usize,
    pub start: f64,
    pub effective_bytes: f64,
}

/// An in-flight transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferState {
    pub layer_index: usize,
    pub remaining: f64,
    /// Current share `b_tra`.
    pub current_bw: f64,
    /// Bandwidth queried at activation, `b_bus`.
    pub predicted_bw: f64,
    pub start_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Finish,
}

/// Snapshot taken after an event has been applied and rates re-shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub layer_index: usize,
    pub active: Vec<TransferState>,
    pub aggregate_predicted: f64,
    pub aggregate_current: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExchangeTrace {
    /// Time of the last completion, 0 when there was nothing to send.
    pub t_pe: f64,
    pub completion_times: Vec<f64>,
    /// Sum of `b_tra * dt` credited to each transfer; equals its effective
    /// bytes up to rounding.
    pub delivered: Vec<f64>,
    pub events: Vec<EventRecord>,
}

fn reshare(active: &mut [TransferState], b_cap: f64) {
    let agg: f64 = active.iter().map(|t| t.predicted_bw).sum();
    let c = active.len() as f64;
    for t in active.iter_mut() {
        t.current_bw = if agg < b_cap {
            t.predicted_bw
        } else {
            t.predicted_bw.min(b_cap / c)
        };
    }
}

/// Runs the exchange. `bandwidth(layer, c)` supplies `b_bus` for a transfer
/// activating while `c` transfers (itself included) are active; it must be
/// positive. Requests are indexed by `layer_index` into the output vectors,
/// so indices must be `0..requests.len()`.
pub fn run_exchange<F, E>(
    requests: &[TransferRequest],
    b_cap: f64,
    mut bandwidth: F,
    record_events: bool,
) -> Result<ExchangeTrace, E>
where
    F: FnMut(usize, u32) -> Result<f64, E>,
{
    let n = requests.len();
    let mut trace = ExchangeTrace {
        t_pe: 0.0,
        completion_times: vec![0.0; n],
        delivered: vec![0.0; n],
        events: Vec::new(),
    };
    let mut pending: Vec<TransferRequest> = requests.to_vec();
    pending.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.layer_index.cmp(&b.layer_index)));
    let mut pending = pending.into_iter().peekable();
    let mut active: Vec<TransferState> = Vec::new();
    let mut now = 0.0f64;

    let snapshot = |trace: &mut ExchangeTrace, active: &[TransferState], time, kind, layer_index| {
        if record_events {
            trace.events.push(EventRecord {
                time,
                kind,
                layer_index,
                active: active.to_vec(),
                aggregate_predicted: active.iter().map(|t| t.predicted_bw).sum(),
                aggregate_current: active.iter().map(|t| t.current_bw).sum(),
            });
        }
    };

    loop {
        let next_finish = active
            .iter()
            .enumerate()
            .map(|(i, t)| (now + t.remaining / t.current_bw, t.layer_index, i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let next_start = pending.peek().map(|r| r.start.max(now));

        match (next_finish, next_start) {
            (None, None) => break,
            (Some((tf, layer, idx)), ns) if ns.is_none_or(|ts| tf <= ts) => {
                let dt = tf - now;
                for t in active.iter_mut() {
                    let moved = t.current_bw * dt;
                    trace.delivered[t.layer_index] += moved;
                    t.remaining = (t.remaining - moved).max(0.0);
                }
                now = tf;
                let done = active.remove(idx);
                // absorb rounding left over from the drain
                trace.delivered[layer] += done.remaining;
                trace.completion_times[layer] = now;
                trace.t_pe = trace.t_pe.max(now);
                reshare(&mut active, b_cap);
                snapshot(&mut trace, &active, now, EventKind::Finish, layer);
            }
            (_, Some(ts)) => {
                let dt = ts - now;
                for t in active.iter_mut() {
                    let moved = t.current_bw * dt;
                    trace.delivered[t.layer_index] += moved;
                    t.remaining = (t.remaining - moved).max(0.0);
                }
                now = ts;
                let req = pending.next().expect("peeked");
                let c = active.len() as u32 + 1;
                let b_bus = bandwidth(req.layer_index, c)?;
                active.push(TransferState {
                    layer_index: req.layer_index,
                    remaining: req.effective_bytes.max(0.0),
                    current_bw: b_bus,
                    predicted_bw: b_bus,
                    start_time: now,
                });
                reshare(&mut active, b_cap);
                snapshot(&mut trace, &active, now, EventKind::Start, req.layer_index);
            }
            (Some(_), None) => unreachable!("guard covers a missing start"),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn req(layer_index: usize, start: f64, bytes: f64) -> TransferRequest {
        TransferRequest {
            layer_index,
            start,
            effective_bytes: bytes,
        }
    }

    #[test]
    fn single_transfer_closed_form() {
        let tr = run_exchange(&[req(0, 2.0, 8e9)], 10e9, |_, _| Ok::<_, Infallible>(4e9), false).unwrap();
        assert_eq!(tr.t_pe, 4.0);
    }

    #[test]
    fn two_simultaneous_transfers_share_the_cap() {
        let tr = run_exchange(
            &[req(0, 0.0, 5e9), req(1, 0.0, 5e9)],
            10e9,
            |_, _| Ok::<_, Infallible>(6e9),
            true,
        )
        .unwrap();
        let last_start = &tr.events[1];
        assert_eq!(last_start.active.len(), 2);
        for t in &last_start.active {
            assert_eq!(t.current_bw, 5e9);
        }
        assert!((tr.t_pe - 1.0).abs() < 1e-12);
    }

    #[test]
    fn under_cap_runs_unthrottled() {
        let tr = run_exchange(&[req(0, 0.0, 4e9)], 10e9, |_, _| Ok::<_, Infallible>(4e9), true).unwrap();
        assert_eq!(tr.events[0].active[0].current_bw, 4e9);
        assert_eq!(tr.t_pe, 1.0);
    }

    #[test]
    fn finish_frees_bandwidth_for_survivor() {
        // both at 5e9 until layer 0 finishes at t=1, then layer 1 alone at 6e9
        let tr = run_exchange(
            &[req(0, 0.0, 5e9), req(1, 0.0, 11e9)],
            10e9,
            |_, _| Ok::<_, Infallible>(6e9),
            false,
        )
        .unwrap();
        assert!((tr.completion_times[0] - 1.0).abs() < 1e-12);
        assert!((tr.t_pe - 2.0).abs() < 1e-12);
        assert!((tr.delivered[1] - 11e9).abs() < 1e-3);
    }

    #[test]
    fn completion_before_start_at_same_time() {
        let mut seen = Vec::new();
        run_exchange(
            &[req(0, 0.0, 1e9), req(1, 1.0, 1e9)],
            10e9,
            |layer, c| {
                seen.push((layer, c));
                Ok::<_, Infallible>(1e9)
            },
            false,
        )
        .unwrap();
        assert_eq!(seen, vec![(0, 1), (1, 1)]);
    }

    #[test]
    fn empty_exchange() {
        let tr = run_exchange(&[], 1.0, |_, _| Ok::<_, Infallible>(1.0), false).unwrap();
        assert_eq!(tr.t_pe, 0.0);
    }

    #[test]
    fn errors_propagate() {
        let r: Result<_, &str> = run_exchange(&[req(0, 0.0, 1.0)], 1.0, |_, _| Err("boom"), false);
        assert_eq!(r.unwrap_err(), "boom");
    }
}
