//! Iteration-latency prediction and instance-configuration search for
//! data-parallel training on heterogeneous cloud instances.

pub mod cloudsim;
pub mod exchange;
pub mod latency;
pub mod netmodel;
pub mod optimizer;
pub mod profiler;
pub mod runtime;
pub mod scenario;
pub mod seed;
pub mod simulator;
pub mod types;
pub mod validate;
