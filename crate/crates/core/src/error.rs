use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core and the model components built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what} = {value} out of range [{lo}, {hi}]")]
    Range { what: &'static str, value: i64, lo: i64, hi: i64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
