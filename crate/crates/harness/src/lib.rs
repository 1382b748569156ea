//! Experiment runner for the qosplane data and control planes: scenario
//! files, a virtual-time simulator, a live loopback runner and the
//! microbenchmarks.

pub mod bench;
pub mod live;
pub mod outcome;
pub mod scenario;
pub mod sim;

pub use outcome::{JobOutcome, RunOutcome};
pub use scenario::{JobSpec, Mode, ScenarioSpec, TraceSpec};
pub use sim::simulate;
