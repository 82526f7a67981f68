#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Deterministic discrete-event simulator of a closed-loop body-area network
//! for multi-modal seizure prediction.
//!
//! Two classifier nodes (EEG and ECG) run budget-constrained MLPs on
//! windowed signals and send verdicts over a lossy ultrasonic TDMA link to a
//! gateway, which fuses them, raises alerts and may trigger an implanted
//! stimulator. Everything runs on a single simulated clock driven by seeded
//! random streams, so a `(config, seed)` pair fully determines a run.

pub mod ban;
pub mod config;
pub mod dbs;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod signal;
pub mod sim;
pub mod simkernel;
pub mod telemetry;
pub mod trainer;
