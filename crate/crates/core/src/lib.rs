//! Core library for a trace-driven automotive edge-map simulator: a
//! crowdsourced perception data plane (projection, matching, fusion), a
//! coverage-constrained scheduling and DQN offloading control plane, and a
//! millisecond-tick network/compute engine with baseline policies.

pub mod geometry;
pub mod mapcore;
pub mod agent;
pub mod config;
pub mod neural;
pub mod policies;
pub mod runner;
pub mod scenario;
pub mod scheduler;
pub mod simnet;
