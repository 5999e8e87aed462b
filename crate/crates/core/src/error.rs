use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcamError>;

#[derive(Debug, Error)]
pub enum DcamError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("augmentation failed: {0}")]
    Augmentation(String),
    #[error("guidance error: {0}")]
    Guidance(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("dataset record {record}: {reason}")]
    Dataset { record: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {reason} (replay info in {replay:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        reason: String,
        replay: PathBuf,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
