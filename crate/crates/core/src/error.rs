use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error{}: {msg}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { offset: Option<u64>, msg: String },

    #[error("training diverged at epoch {epoch} (lr {lr}): loss is not finite")]
    TrainingDiverged { epoch: usize, lr: f32 },

    #[error("baseline standard deviation is zero; sigma gain is undefined")]
    DegenerateSd,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for command-line use: 2 config, 3 data/format, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::TrainingDiverged { .. } => 4,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Shape(_)
            | Error::Contract(_)
            | Error::DegenerateSd => 3,
        }
    }
}
