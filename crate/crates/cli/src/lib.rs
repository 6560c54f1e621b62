//! Experiment harness around `contistream-core`: TOML configs, seed fan-out,
//! grid search on the dev split, reports, timing and overhead.

pub mod commands;
pub mod config;

pub use config::{ConfigError, ExperimentConfig, Loaded, Overrides};

/// Exit status for an error: 2 for configuration and usage problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err
        .chain()
        .any(|e| e.downcast_ref::<ConfigError>().is_some())
    {
        2
    } else {
        1
    }
}
