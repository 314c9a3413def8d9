//! Deterministic simulator for co-serving RL rollouts on serving GPUs.

pub mod config;
pub mod cost;
pub mod eventlog;
pub mod executor;
pub mod kernel;
pub mod kvc;
pub mod metrics;
pub mod scenario;
pub mod scheduler;
pub mod sim;
pub mod time;
pub mod workload;
