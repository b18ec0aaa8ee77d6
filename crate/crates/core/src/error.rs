use thiserror::Error;

use crate::crossfit::NuisanceId;

/// Errors raised while loading or constructing a dataset.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{column}`")]
    NonNumericCell { row: usize, column: String },
    #[error("missing values in column `{column}` at rows {rows:?}")]
    MissingValues { column: String, rows: Vec<usize> },
    #[error("panel unit `{0}` does not have exactly one row per period")]
    InconsistentPanelUnit(String),
    #[error("period indicator at row {row} is not 0 or 1")]
    InvalidPeriod { row: usize },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("column lengths disagree")]
    LengthMismatch,
    #[error("csv error: {0}")]
    Csv(String),
}

/// Errors raised by the lasso learners.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NuisanceError {
    #[error("coordinate descent did not converge within {0} sweeps")]
    DidNotConverge(usize),
    #[error("feature width {got} does not match fit-time width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("{got} rows is fewer than the {needed} required")]
    TooFewRows { needed: usize, got: usize },
    #[error("non-finite value in learner input")]
    NonFiniteInput,
}

/// Errors raised by score construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("nuisance {0} is missing")]
    MissingNuisance(NuisanceId),
    #[error("non-finite score term at row {0}")]
    NonFiniteTerm(usize),
    #[error("kernel bandwidth must be positive, got {0}")]
    NonpositiveBandwidth(f64),
    #[error("scalar share {0} is missing")]
    MissingShare(String),
    #[error("estimand is not available for this design: {0}")]
    Unsupported(String),
}

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid contrast: {0}")]
    InvalidContrast(String),
    #[error("required cell (d={d}, m={m:?}, t={t:?}) has no observations")]
    EmptyRequiredCell { d: f64, m: Option<f64>, t: Option<u8> },
    #[error("nuisance {id} has no training rows when fold {fold} is held out")]
    EmptyTrainingCell { id: NuisanceId, fold: usize },
    #[error("group `{0}` retains fewer than 2 observations after trimming")]
    TooFewUntrimmed(String),
    #[error("score contributions have zero variance")]
    DegenerateVariance,
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Data(#[from] DataError),
}
