//! Experiment harness for the shallow-diffusion library: a TOML-configured
//! pipeline that generates data, trains per-timestep score models, samples
//! from the reverse chain, and aggregates the results into records, tables,
//! and plots.
//!
//! Every artifact is derived deterministically from the configuration file
//! and a seed, and every output embeds the configuration fingerprint so that
//! records from different runs can be told apart after the fact.

use std::fmt;

pub mod config;
pub mod record;
pub mod report;
pub mod runs;
pub mod selftest;
pub mod sweep;

pub use config::ExperimentConfig;
pub use record::{ExperimentRecord, SamplerMetrics, TimestepRow};
pub use report::{fit_rate_exponent, RateFit};

/// A failed command, classified by the exit code it should produce:
/// usage errors exit 2, configuration errors 3, runtime failures 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl ToString) -> Self {
        Failure::Usage(msg.to_string())
    }

    pub fn config(msg: impl ToString) -> Self {
        Failure::Config(msg.to_string())
    }

    pub fn runtime(msg: impl ToString) -> Self {
        Failure::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}
