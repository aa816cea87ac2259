use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("track {agent_id}: non-uniform frame stride")]
    NonUniformStride { agent_id: String },

    #[error("cannot upsample from {source_fps} fps to {target_fps} fps")]
    Upsample { source_fps: f64, target_fps: f64 },

    #[error("split: {0}")]
    Split(String),

    #[error("degenerate probability map: all cells are zero")]
    DegenerateMap,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: goal {goal_loss}, traj {traj_loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        goal_loss: f64,
        traj_loss: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint mismatch on keys: {0:?}")]
    CheckpointMismatch(Vec<String>),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
