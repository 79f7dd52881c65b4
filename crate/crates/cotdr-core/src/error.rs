//! Error type shared across the measurement pipeline.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Probe generation rejected its inputs (burst too short, bad bit rate).
    Probe(String),
    /// Waveform shaping rejected its inputs (oversampling, roll-off range).
    Waveform(String),
    /// Topology failed validation.
    Topology(String),
    /// The requested switch state routes no light to the receiver.
    NoPath(String),
    /// An acquisition window cuts through an echo instead of containing or
    /// excluding it.
    WindowClip(String),
    /// Correlation inputs are sampled at different rates.
    RateMismatch { received: f64, reference: f64 },
    /// Peak fit did not converge or had no usable candidate.
    Fit(String),
    /// A protocol step failed; carries the section it was measuring.
    Measurement { section: String, reason: String },
    /// Scenario file did not parse.
    ScenarioParse(String),
    /// Scenario parsed but a key violates a constraint.
    ScenarioKey { key: String, reason: String },
    /// Filesystem failure while reading scenarios or writing outputs.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Probe(msg) => write!(f, "probe: {msg}"),
            Error::Waveform(msg) => write!(f, "waveform: {msg}"),
            Error::Topology(msg) => write!(f, "topology: {msg}"),
            Error::NoPath(msg) => write!(f, "no optical path: {msg}"),
            Error::WindowClip(msg) => write!(f, "acquisition window: {msg}"),
            Error::RateMismatch {
                received,
                reference,
            } => write!(
                f,
                "sample rate mismatch: received {received} S/s vs reference {reference} S/s"
            ),
            Error::Fit(msg) => write!(f, "peak fit: {msg}"),
            Error::Measurement { section, reason } => {
                write!(f, "measurement of {section} failed: {reason}")
            }
            Error::ScenarioParse(msg) => write!(f, "scenario parse: {msg}"),
            Error::ScenarioKey { key, reason } => write!(f, "scenario key `{key}`: {reason}"),
            Error::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
