//! Error taxonomy shared across the toolkit, with the process exit codes the
//! CLI maps each class to.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, bad value, incompatible shapes chosen
    /// at configuration time (resolutions, widths, strides).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or inconsistent input data: unreadable samples, malformed
    /// image files, masks with non-binary values, manifest mismatches.
    #[error("data error: {0}")]
    Data(String),

    /// An argument is outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated by the caller (wrong shapes, wrong call
    /// order); these indicate bugs rather than bad user input.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical failure during optimization, e.g. a NaN loss.
    #[error("numerical abort: {0}")]
    Numerics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 2 configuration, 3 data/I/O,
    /// 4 numerical abort. Success is 0.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerics(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
