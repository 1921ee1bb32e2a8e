//! Self-calibrating digital twin of a datacenter's power draw.
//!
//! A discrete-event simulator ([`simengine`]) predicts cluster power window by
//! window from a workload trace; the [`calibrator`] continuously refits the
//! power-curve exponent against measured telemetry; the [`orchestrator`] ties
//! both to a telemetry feed and persists per-window reports to a
//! [`workspace`].

pub mod calibrator;
pub mod clock;
pub mod formats;
pub mod model;
pub mod orchestrator;
pub mod power;
pub mod simengine;
pub mod telemetry;
pub mod workspace;

pub use model::*;
