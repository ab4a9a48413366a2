//! Orchestration core: worker supervision, operators, evaluation modes,
//! telemetry and the control daemon.

pub mod clock;
pub mod conformance;
pub mod control_api;
pub mod evaluation;
pub mod operator;
pub mod par;
pub mod policy;
pub mod supervisor;
pub mod telemetry;
pub mod worker;
