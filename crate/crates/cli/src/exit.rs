//! Exit codes and the mapping from library errors onto them.

use std::fmt;

use threshold_lab::Error;

pub const OK: u8 = 0;
/// Bad flags, config keys or values, unstable parameters, unwritable output.
pub const INVALID_INPUT: u8 = 2;
/// A solver failed to converge or to meet its accuracy checks.
pub const NO_CONVERGENCE: u8 = 3;
/// A simulation guard such as the queue cap tripped.
pub const SIM_GUARD: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: INVALID_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(error: &Error) -> u8 {
    match error {
        Error::InvalidParams(_)
        | Error::Unstable { .. }
        | Error::IndexOutOfRange(_)
        | Error::InvalidState(_)
        | Error::TruncationTooShort { .. }
        | Error::DExceedsN { .. }
        | Error::InvalidConfig(_)
        | Error::StateSpaceTooLarge { .. }
        | Error::BoundInfeasible { .. }
        | Error::Io(_) => INVALID_INPUT,
        Error::InvariantViolation { .. }
        | Error::NonFinite { .. }
        | Error::NoConvergence(_)
        | Error::NoRoot { .. }
        | Error::TailDiverged(_)
        | Error::NegativeTail { .. }
        | Error::TruncationMassTooHigh { .. }
        | Error::LinearSolve(_) => NO_CONVERGENCE,
        Error::QueueCapExceeded { .. } => SIM_GUARD,
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError {
            code: code_for(&error),
            message: error.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(error: std::io::Error) -> Self {
        CliError::invalid(format!("i/o error: {error}"))
    }
}
