use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("schedule error: step {step} outside [0, {total}]")]
    Schedule { step: u64, total: u64 },

    #[error("loss error: {0}")]
    Loss(String),

    #[error("non-finite {what} at global step {step}")]
    Divergence { what: &'static str, step: u64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("accounting error: unsupported layer `{0}`")]
    Accounting(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
