//! Experiment commands behind the `depthar` binary: dataset generation,
//! training, evaluation and the three-way ablation.

pub mod commands;
pub mod config;
pub mod csvio;

pub use commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_train, AblationReport, EvalRequest};
pub use config::ExperimentConfig;

use depthar::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Process exit code for a library error: 1 usage/config, 2 numeric,
/// 3 I/O or unreadable input files.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Config { .. } | Error::Contract(_) | Error::Range(_) | Error::Shape { .. } => {
            EXIT_CONFIG
        }
    }
}
