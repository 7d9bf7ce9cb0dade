use thiserror::Error;

use crate::lp::LpError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {element}: {message}")]
    Validation { element: String, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("degenerate split: one side of the hyperplane is empty")]
    DegenerateSplit,
    #[error("polytope is empty")]
    EmptyPolytope,
    #[error("polytope is unbounded")]
    UnboundedPolytope,
    #[error("state lies outside cell {0}")]
    OutsideCell(usize),
    #[error("witness is stationary (successor mean equals the state)")]
    StationaryWitness,
    #[error("edge {source_cell} -> {target} is stale: query is unsatisfiable at the recorded threshold")]
    StaleEdge { source_cell: usize, target: String },
    #[error("edge {source_cell} -> {target} is at the floor bound and has no witness")]
    FloorEdge { source_cell: usize, target: String },
    #[error("graph document: {0}")]
    GraphFormat(String),
    #[error("graph document checksum mismatch")]
    Checksum,
    #[error("graph document version {found} is not supported (expected {expected})")]
    Version { found: String, expected: String },
    #[error("scenario is not two-dimensional in position")]
    NotPlanar,
    #[error("every candidate split was degenerate")]
    NoRefinement,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(element: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            element: element.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
