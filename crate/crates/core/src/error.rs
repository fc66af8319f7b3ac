use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::channel::ChannelError;
use crate::comm::CommError;
use crate::container::ContainerError;
use crate::crlb::CrlbError;
use crate::otfs::OtfsError;
use crate::predictor::PredictorError;
use crate::preeq::PreeqError;
use crate::scenario::ScenarioError;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Otfs(#[from] OtfsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Crlb(#[from] CrlbError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Preeq(#[from] PreeqError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{what} not found at {path}; {hint}")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
