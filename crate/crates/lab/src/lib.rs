//! File formats, training/evaluation drivers, reports and the steering
//! service built on top of `hyt-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod service;

use std::time::Instant;

use hyt_core::eval::Clock;

/// Monotonic wall clock for decode latency.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error("checkpoint refused: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Train(#[from] hyt_core::hyt::TrainError),
    #[error(transparent)]
    Eval(#[from] hyt_core::eval::EvalError),
    #[error(transparent)]
    Oracle(#[from] hyt_core::oracle::OracleError),
    #[error(transparent)]
    Codec(#[from] hyt_core::codec::CodecError),
    #[error(transparent)]
    Net(#[from] hyt_core::net::NetError),
    #[error("config: {0}")]
    Config(String),
}

impl LabError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
