//! Disentangled shared/private representation learning for two-modality
//! classification, on a small reverse-mode differentiation core.

pub mod config;
pub mod datasets;
pub mod diffcore;
mod error;
pub mod gradsuite;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;
