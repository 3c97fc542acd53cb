//! Command-line driver: config files, checkpoints and the
//! synth → train → calibrate → eval → explain → compare commands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use ordiformer::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Unsupported(_) | Error::Shape { .. } | Error::Domain { .. } => {
            EXIT_CONFIG
        }
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Numeric(_) => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}
