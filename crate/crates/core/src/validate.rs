use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Plan, TrainJob};

/// Structural problems that make a plan impossible to check.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("plan references vm type {0} which is not a candidate of the job")]
    UnknownType(String),
    #[error("plan lists vm type {0} more than once")]
    DuplicateType(String),
}

/// A violated constraint together with the offending quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    BatchSum {
        actual: u64,
        expected: u64,
    },
    BatchBelowThreshold {
        vm_type_id: String,
        batch: u64,
        threshold: u64,
    },
    BatchAboveMemcap {
        vm_type_id: String,
        batch: u64,
        memcap: u64,
    },
    QuotaExceeded {
        vm_type_id: String,
        count: u32,
        quota: u32,
    },
    ZeroCount {
        vm_type_id: String,
    },
    TimeLimit {
        predicted: f64,
        limit: f64,
    },
    Budget {
        predicted: f64,
        limit: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BatchSum { actual, expected } => {
                write!(f, "batch-sum violation: {actual} != {expected}")
            }
            Violation::BatchBelowThreshold {
                vm_type_id,
                batch,
                threshold,
            } => {
                write!(f, "batch {batch} on {vm_type_id} below threshold {threshold}")
            }
            Violation::BatchAboveMemcap {
                vm_type_id,
                batch,
                memcap,
            } => {
                write!(f, "batch {batch} on {vm_type_id} above memory cap {memcap}")
            }
            Violation::QuotaExceeded {
                vm_type_id,
                count,
                quota,
            } => {
                write!(f, "quota violation on {vm_type_id}: {count} > {quota}")
            }
            Violation::ZeroCount { vm_type_id } => write!(f, "{vm_type_id} listed with zero instances"),
            Violation::TimeLimit { predicted, limit } => {
                write!(f, "predicted time {predicted:.3}s exceeds limit {limit:.3}s")
            }
            Violation::Budget { predicted, limit } => {
                write!(f, "predicted cost {predicted:.4} exceeds budget {limit:.4}")
            }
        }
    }
}

/// Checks a plan against every constraint family of its job. Returns an
/// empty list when the plan is valid.
pub fn validate_plan(plan: &Plan, job: &TrainJob) -> Result<Vec<Violation>, PlanError> {
    let mut seen = BTreeSet::new();
    for e in &plan.entries {
        if job.vm_type(&e.vm_type_id).is_none() {
            return Err(PlanError::UnknownType(e.vm_type_id.clone()));
        }
        if !seen.insert(e.vm_type_id.as_str()) {
            return Err(PlanError::DuplicateType(e.vm_type_id.clone()));
        }
    }

    let mut out = Vec::new();
    let total = plan.global_batch();
    if total != job.global_batch {
        out.push(Violation::BatchSum {
            actual: total,
            expected: job.global_batch,
        });
    }
    for e in &plan.entries {
        let t = job.vm_type(&e.vm_type_id).expect("checked above");
        if e.count == 0 {
            out.push(Violation::ZeroCount {
                vm_type_id: e.vm_type_id.clone(),
            });
        }
        if e.batch < t.threshold_batch {
            out.push(Violation::BatchBelowThreshold {
                vm_type_id: e.vm_type_id.clone(),
                batch: e.batch,
                threshold: t.threshold_batch,
            });
        }
        if e.batch > t.memcap_batch {
            out.push(Violation::BatchAboveMemcap {
                vm_type_id: e.vm_type_id.clone(),
                batch: e.batch,
                memcap: t.memcap_batch,
            });
        }
        if e.count > t.quota {
            out.push(Violation::QuotaExceeded {
                vm_type_id: e.vm_type_id.clone(),
                count: e.count,
                quota: t.quota,
            });
        }
    }
    if let (Some(predicted), Some(limit)) = (plan.predicted_time, job.time_limit) {
        if predicted > limit {
            out.push(Violation::TimeLimit { predicted, limit });
        }
    }
    if let (Some(predicted), Some(limit)) = (plan.predicted_cost, job.budget) {
        if predicted > limit {
            out.push(Violation::Budget { predicted, limit });
        }
    }
    Ok(out)
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
                .map(|(id, count, batch)| PlanEntry {
                    vm_type_id: id.to_string(),
                    count: *count,
                    batch: *batch,
                })
                .collect(),
        )
    }

    #[test]
    fn valid_plan_has_no_violations() {
        let j = job(256, vec![vm("A", 4, 64, 256, 1.0)]);
        assert_eq!(validate_plan(&plan(&[("A", 2, 128)]), &j), Ok(vec![]));
    }

    #[test]
    fn batch_sum_mismatch() {
        let j = job(512, vec![vm("A", 4, 64, 256, 1.0)]);
        assert_eq!(
            validate_plan(&plan(&[("A", 2, 128)]), &j),
            Ok(vec![Violation::BatchSum {
                actual: 256,
                expected: 512
            }])
        );
    }

    #[test]
    fn quota_exceeded() {
        let j = job(320, vec![vm("A", 4, 64, 256, 1.0)]);
        assert_eq!(
            validate_plan(&plan(&[("A", 5, 64)]), &j),
            Ok(vec![Violation::QuotaExceeded {
                vm_type_id: "A".into(),
                count: 5,
                quota: 4
            }])
        );
    }

    #[test]
    fn batch_bounds_and_predictions() {
        let mut j = job(64, vec![vm("A", 4, 64, 256, 1.0)]);
        j.time_limit = Some(10.0);
        j.budget = Some(0.001);
        let mut p = plan(&[("A", 2, 32)]);
        p.predicted_time = Some(12.0);
        p.predicted_cost = Some(0.002);
        let v = validate_plan(&p, &j).unwrap();
        assert_eq!(v.len(), 3);
        assert!(matches!(v[0], Violation::BatchBelowThreshold { batch: 32, .. }));
        assert!(matches!(v[1], Violation::TimeLimit { .. }));
        assert!(matches!(v[2], Violation::Budget { .. }));
    }

    #[test]
    fn unknown_type_is_structural() {
        let j = job(256, vec![vm("A", 4, 64, 256, 1.0)]);
        assert_eq!(
            validate_plan(&plan(&[("B", 2, 128)]), &j),
            Err(PlanError::UnknownType("B".into()))
        );
    }

    #[test]
    fn pure_function() {
        let j = job(512, vec![vm("A", 4, 64, 256, 1.0)]);
        let p = plan(&[("A", 5, 64)]);
        assert_eq!(validate_plan(&p, &j), validate_plan(&p, &j));
    }
}
