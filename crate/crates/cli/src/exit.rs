//! Error classes and their process exit codes.

use std::path::PathBuf;

use lorawhisper::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{} already exists (use --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

/// 0 is success and 2 is a usage error (reported by clap).
pub const OTHER: u8 = 1;
pub const VALIDATION: u8 = 3;
pub const MISSING: u8 = 4;
pub const FINGERPRINT: u8 = 5;
pub const CORRUPT: u8 = 6;
pub const ROUTING: u8 = 7;
pub const NUMERIC: u8 = 8;
pub const EXISTS: u8 = 9;

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::Rank { .. }
        | Error::Capacity(_)
        | Error::Conflict(_)
        | Error::Sampling { .. }
        | Error::Json(_) => VALIDATION,
        Error::Fingerprint { .. } => FINGERPRINT,
        Error::Checksum { .. } | Error::Version { .. } | Error::Format(_) => CORRUPT,
        Error::Routing(_) => ROUTING,
        Error::Numeric(_) | Error::DegenerateMass => NUMERIC,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => MISSING,
        _ => OTHER,
    }
}

/// Exit code of the first recognised error in the chain.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Missing(_) => MISSING,
                CliError::Exists(_) => EXISTS,
                CliError::Invalid(_) => VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return VALIDATION;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return MISSING;
            }
        }
    }
    OTHER
}
