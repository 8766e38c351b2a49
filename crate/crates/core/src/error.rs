use std::path::PathBuf;

use thiserror::Error;

use crate::train::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
        partial: Box<TrainReport>,
    },

    #[error("cannot ingest {}: {reason}", path.display())]
    Ingest { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("weight {value} exceeds mapping range ±{w_max}")]
    Range { value: f64, w_max: f64 },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("refusing to overwrite existing artifact {}", .0.display())]
    ArtifactExists(PathBuf),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Coarse failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_)
            | Error::Toml(_)
            | Error::Capacity(_)
            | Error::Layout(_)
            | Error::ArtifactExists(_) => ErrorClass::Config,
            Error::Ingest { .. }
            | Error::Dataset(_)
            | Error::MissingArtifact(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Io(_) => ErrorClass::Data,
            Error::NumericDomain(_) | Error::Divergence { .. } | Error::Range { .. } => {
                ErrorClass::Runtime
            }
            Error::Stage { source, .. } => source.class(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericDomain(format!("{what} is not finite ({value})")))
    }
}
