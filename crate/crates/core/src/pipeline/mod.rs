//! Dataset ingestion, training orchestration, persistence, prediction and
//! diagnostics.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod fit;
pub mod predict;
pub mod store;
pub mod synth;

use std::path::Path;

use thiserror::Error;

use crate::graph::GraphError;
use crate::likelihood::ModelError;
use crate::sampler::SamplerError;
use crate::tree::TreeError;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("{path}: row {row}, column {column:?}: cannot parse {value:?}")]
    Cell {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{0}: no data rows")]
    EmptyFile(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("response type: {0}")]
    ResponseType(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("config: {0}")]
    Config(String),
    #[error("posterior store has no draws")]
    EmptyStore,
    #[error("store: {0}")]
    Store(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }

    /// Bad user input (exit code 1) as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Self::Io { .. } | Self::Sampler(_) | Self::Model(_) | Self::Tree(_) | Self::Store(_)
        )
    }
}
