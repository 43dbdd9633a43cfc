use std::io;

use thiserror::Error;

use crate::datasets::DataError;
use crate::diffcore::DiffError;
use crate::model::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {term} at epoch {epoch}, step {step} (value {value})")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Runtime numerical failure as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
