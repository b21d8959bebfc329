//! Command implementations behind the `slotintent` binary.

pub mod commands;
pub mod config;

use std::fmt;

/// Bad flags, config values or missing input files (exit code 2).
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// 2 for usage errors, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<slotintent::Error>() {
        Some(slotintent::Error::Config { .. }) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}
