use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("exponential moment condition fails: C = {c} is not below the critical exponent {critical}")]
    MomentCondition { c: f64, critical: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix in {context} (condition number {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("step size violates stability bound: {0}")]
    StepSize(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn domain<S: Into<String>>(msg: S) -> Error {
    Error::Domain(msg.into())
}
