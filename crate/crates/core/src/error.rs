use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("element {index} is {value}, expected exactly -1 or +1")]
    NotBinary { index: usize, value: f64 },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,
    #[error("binarization benefit undefined: {0} difference is zero")]
    UndefinedBenefit(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; parameter norms: {norms}")]
    NonFinite { step: usize, norms: String },
}

impl Error {
    pub(crate) fn dim(axis: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            found,
        }
    }
}
