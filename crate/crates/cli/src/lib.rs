//! Batch front end: simulate data, fit subjects, combine groups and run
//! benchmark tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod results;

pub use commands::Status;
pub use config::{InvalidConfig, Method, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Group,
    Benchmark,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Validates the config and runs the command on a pool of `cfg.threads`
/// workers.
pub fn run(command: Command, cfg: &RunConfig) -> anyhow::Result<Status> {
    cfg.validate()?;
    surface_glm::par::with_threads(cfg.threads, || match command {
        Command::Simulate => commands::simulate(cfg),
        Command::Fit => commands::fit(cfg),
        Command::Group => commands::group(cfg),
        Command::Benchmark => commands::benchmark(cfg),
    })?
}

pub fn status_code(status: Status) -> i32 {
    match status {
        Status::Success => 0,
        Status::NotConverged => EXIT_NOT_CONVERGED,
    }
}

/// Exit code of a failed command, from the first recognized cause.
pub fn error_code(err: &anyhow::Error) -> i32 {
    use surface_glm::Error as E;
    for cause in err.chain() {
        if cause.is::<InvalidConfig>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Parse { .. } | E::Json(_) => EXIT_IO,
                E::Validation(_) | E::InvalidParameter(_) | E::DimensionMismatch(_) => {
                    EXIT_VALIDATION
                }
                _ => EXIT_FAILURE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}
