//! Library half of the `dico` binary, so the acceptance tests can drive
//! commands in-process.

pub mod commands;
pub mod config;

use dico_core::Error;

pub use commands::dispatch;
pub use config::{Command, RunConfig};

/// Process exit code for an error: 2 for bad input, 3 for files, 4 for
/// numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
    }
}
