//! Experiment runner for the `jumpflow` library.

pub mod config;
pub mod output;
pub mod runner;
pub mod scenario;
pub mod studies;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const INTEGRATION: i32 = 3;
    pub const PROPERTY: i32 = 4;
    pub const STOPPED_AT_TAU: i32 = 5;
}

/// Maps a failed run to an exit code. Numerical breakdowns are integration
/// failures; anything else rejected by the library stems from the config.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use jumpflow::error::Error;
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::IntegrationFailure { .. }
                | Error::Degenerate { .. }
                | Error::InverseFailure(_)
                | Error::MeshResolution(_)
                | Error::MissingJacobians => exit::INTEGRATION,
                _ => exit::CONFIG,
            };
        }
    }
    exit::CONFIG
}
