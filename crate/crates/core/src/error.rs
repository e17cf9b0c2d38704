use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("incompatible variant: {0}")]
    IncompatibleVariant(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("eigen solver did not converge: {0}")]
    NoConvergence(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
