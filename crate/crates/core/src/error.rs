use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest line {line}, field `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("study {study_id} references missing volume {}", path.display())]
    DanglingReference { study_id: String, path: PathBuf },
    #[error("duplicate study: {0}")]
    DuplicateStudy(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("split operations take a single modality, found {0}")]
    MixedModality(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("wrong processing stage: {0}")]
    Stage(String),
    #[error("degenerate statistics for {0}: standard deviation is zero")]
    DegenerateStats(String),
    #[error("no standardization statistics for sequence type {0}")]
    UnknownSequenceType(String),
    #[error("training-only operation received a {0} volume")]
    PartitionLeak(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),
    #[error("class weighting needs both classes: {0}")]
    Weighting(String),
    #[error("probability {0} outside (0, 1)")]
    Domain(f64),
    #[error("calibration needs both classes")]
    Calibration,
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("Fleiss' kappa undefined: expected agreement is 1")]
    UndefinedKappa,
    #[error("no completed result: {0}")]
    NoResult(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("fold {fold} has a single-class validation set")]
    FoldDegeneracy { fold: usize },
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Nn(#[from] mvscan_nn::NnError),
    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
