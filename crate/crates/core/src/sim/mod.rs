//! Deterministic discrete-event simulation of secure-cluster scenarios.
//!
//! A run is a pure function of the scenario (including its seed): two runs
//! produce byte-identical metrics and traces. The event loop is strictly
//! single-threaded; parallel sweeps over scenarios share nothing.

mod metrics;
mod scenario;
mod trace;
mod world;

pub use metrics::{Metrics, VscSample};
pub use scenario::{Initiator, Role, Scenario, VehicleSpec, Velocity};
pub use trace::{FrameOutcome, TraceEvent};
pub use world::{place_eavesdropper_validly, run, run_with_trace, World};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario invalid at {field}: {reason}")]
    InvalidScenario { field: String, reason: String },
    #[error("eavesdropper assumption violated: {0}")]
    AssumptionViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
