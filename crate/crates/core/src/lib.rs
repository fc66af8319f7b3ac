//! OTFS integrated sensing and communication.

// `!(x > 0.0)` is used on purpose so that NaN takes the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod linalg;
pub mod otfs;
pub mod comm;
pub mod crlb;
pub mod container;
pub mod scenario;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod preeq;
pub mod error;
pub mod experiment;

pub use channel::{ChannelMatrix, PathParams};
pub use error::{Error, Result};
pub use experiment::{CsiMode, ExperimentConfig};
pub use linalg::CMatrix;
pub use otfs::FrameConfig;
pub use preeq::PreEqNet;
pub use predictor::{PredictorBundle, SeriesParam};
pub use scenario::{Dataset, ParamSeries, ScenarioParams};
