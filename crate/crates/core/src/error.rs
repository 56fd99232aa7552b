use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants line up with the CLI exit codes: structural and config
/// problems exit with 1, data problems with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranges or arguments that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// Bad configuration or command-line usage.
    #[error("config error: {0}")]
    Config(String),
    /// Input data that is malformed, corrupted or unusable.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or divergence.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Structural(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
