use thiserror::Error;

use crate::capsule::CapsuleError;
use crate::features::FeatureError;
use crate::harness::HarnessError;
use crate::nmf::NmfError;
use crate::posteriorgram::PosteriorgramError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification of failures, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or malformed input.
    Config,
    /// A model and a dataset (or feature config) do not belong together.
    Incompatible,
    /// Training diverged or produced non-finite values.
    Numerical,
    /// Filesystem failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Posteriorgram(#[from] PosteriorgramError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Posteriorgram(e) => e.kind(),
            Error::Feature(_) => ErrorKind::Config,
            Error::Nmf(e) => e.kind(),
            Error::Capsule(e) => e.kind(),
            Error::Harness(e) => e.kind(),
        }
    }
}
