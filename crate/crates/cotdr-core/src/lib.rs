//! Correlation-OTDR link delay measurement.
//!
//! A probe bit burst is launched into a simulated multi-span optical link;
//! echoes from delimiting reflectors come back with the link's round-trip
//! delays imprinted on them. Cross-correlating the received record with the
//! transmitted waveform and fitting the correlation peaks recovers those
//! delays to a small fraction of the sampling period. A switched three-step
//! procedure extends the reflective measurement to links whose nodes only
//! pass light one way, and an error budget tracks what the receiver clock,
//! temperature drift, and the fits themselves contribute.
//!
//! Modules follow the pipeline:
//!
//! - [`signal`]: probe burst generation and pulse shaping
//! - [`link`]: link topology, echo enumeration, received-waveform synthesis
//! - [`correlator`]: cross-correlation, peak detection, sub-sample fitting
//! - [`protocol`]: the switched per-section measurement procedure
//! - [`budget`]: closed-form error terms
//! - [`scenario`]: declarative scenario files
//! - [`report`]: measurement reports and trace dumps

pub mod budget;
pub mod correlator;
pub mod error;
pub mod link;
pub mod protocol;
pub mod report;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
