//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operation received incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Raster/grid geometry does not match the configuration.
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// An API contract was violated (e.g. non-scalar loss).
    #[error("contract: {0}")]
    Contract(String),

    /// A mask references more objects than the model supports.
    #[error("object count {found} exceeds maximum {max}")]
    ObjectCount { found: usize, max: usize },

    /// A quantity outside its mathematical domain (negative ratio, zero
    /// temperature, ...).
    #[error("domain: {0}")]
    Domain(String),

    /// Non-finite value where a finite one is required; carries diagnostics.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed or incompatible checkpoint.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Coarse machine-parsable category, used by the CLI for exit codes and
    /// one-line error reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. }
            | Error::Geometry(_)
            | Error::Config(_)
            | Error::Contract(_)
            | Error::ObjectCount { .. }
            | Error::Domain(_)
            | Error::Checkpoint(_) => "config",
            Error::NonFinite(_) => "numeric",
            Error::Io(_) | Error::Image(_) => "io",
        }
    }
}
