use thiserror::Error;

use crate::planner::PlanSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} sums to {sum}, expected 1 within {tolerance:e}")]
    RowSum { row: usize, sum: f64, tolerance: f64 },

    #[error("{matrix} entry ({row}, {col}) is negative: {value}")]
    NegativeEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("{matrix} entry ({row}, {col}) is not a probability: {value}")]
    ProbabilityOutOfRange {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("{matrix} entry ({row}, {col}) is not finite")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("a chain needs at least 2 states, got {0}")]
    TooFewStates(usize),

    #[error("loss diagonal entry ({index}, {index}) must be 0, got {value}")]
    NonZeroDiagonal { index: usize, value: f64 },

    #[error("state index {index} out of range for {states} states")]
    InvalidState { index: usize, states: usize },

    #[error("elapsed time {requested} exceeds precomputed horizon {horizon}")]
    HorizonExceeded { requested: usize, horizon: usize },

    #[error("stationary distribution is not unique: chain has {closed_classes} closed classes")]
    StationaryNotUnique { closed_classes: usize },

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("policy iteration did not settle after {iterations} iterations")]
    PolicyIterationStalled {
        iterations: usize,
        best: Box<PlanSolution>,
    },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("enumeration of {candidates} threshold vectors exceeds limit {limit}")]
    TooLarge { candidates: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::PolicyIterationStalled { .. }
                | Error::SingularSystem(_)
                | Error::StationaryNotUnique { .. }
                | Error::TooLarge { .. }
                | Error::HorizonExceeded { .. }
        )
    }
}
