//! Discrete-event simulation of serverless event scheduling.
//!
//! Three controllers are compared on the same cluster model:
//!
//! * [`ow`]: the OpenWhisk hash-and-probe heuristic,
//! * [`noncoop`]: noncooperative M/M/1 load balancing with iterated best
//!   replies,
//! * [`noah`]: Erlang-C sized virtual allocations with site-local
//!   queue-or-spawn decisions.
//!
//! A run is built from a [`Scenario`] and executed by [`sim::Simulation`];
//! [`experiments`] turns runs into summary rows and sweeps.

pub mod cluster;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod noah;
pub mod noncoop;
pub mod ow;
pub mod queueing;
pub mod scenario;
pub mod sim;
pub mod units;
pub mod verify;
pub mod workload;

pub use error::SimError;
pub use experiments::{run_once, summarize, RunSummary};
pub use scenario::{Scenario, SchedulerSpec};
pub use sim::{run_scenario, RunOptions, RunOutput, Simulation};
