use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate state: {0}")]
    DegenerateState(String),
    #[error("breakdown of the effective description at t = {time}: column of label {label} has diagonal {diagonal}")]
    Breakdown {
        time: f64,
        label: u64,
        diagonal: f64,
    },
    #[error("composition error: {0}")]
    Composition(String),
    #[error("empty ensemble: {0}")]
    EmptyEnsemble(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
