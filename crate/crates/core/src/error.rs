use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {} has no matching mask", .0.display())]
    MissingMask(PathBuf),

    #[error("mask {} has no matching image", .0.display())]
    MissingImage(PathBuf),

    #[error("mask {} contains value {value} but the dataset has {num_classes} classes", .path.display())]
    MaskValue { path: PathBuf, value: u8, num_classes: u8 },

    #[error("support set does not cover classes {0:?}")]
    Coverage(Vec<u8>),

    #[error("unknown parameter block `{0}`")]
    MissingParam(String),

    #[error("checkpoint is missing blocks: {0}")]
    MissingBlocks(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("support data supplied to a support-free model")]
    SupportNotAllowed,

    #[error("teacher model requires a support set")]
    SupportRequired,

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
