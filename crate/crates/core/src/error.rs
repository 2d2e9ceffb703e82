use std::path::PathBuf;

use thiserror::Error;
use tubeseg_autodiff::AutodiffError;

use crate::data::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(Violation),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("matching capacity exceeded: {gt} ground-truth things for {slots} thing slots")]
    Capacity { gt: usize, slots: usize },
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("stitching error: {0}")]
    Stitch(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("non-finite loss component `{component}` at step {step}: {value}")]
    NonFiniteLoss {
        component: &'static str,
        step: usize,
        value: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
