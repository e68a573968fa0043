use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Calibration data contains only one class.
    #[error("degenerate data: no samples labelled {missing}")]
    DegenerateData { missing: &'static str },

    #[error("template for {role} is missing slot `{slot}`")]
    MissingSlot { role: &'static str, slot: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unparseable statement: {0}")]
    Unparseable(String),

    #[error(transparent)]
    Client(#[from] crate::modelio::ClientError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
