//! Remote monitoring of a finite-state Markov source under a per-query
//! sampling cost.
//!
//! At every slot a monitor either pays `c` to query the source's true state
//! or predicts it from the last queried state and the time since that
//! query, paying the loss-matrix entry for a wrong guess. The crate
//! provides the optimal predictor, the greedy and heuristic query rules,
//! the optimal state-dependent threshold policy computed by average-cost
//! policy iteration, a projected-SGD learner for unknown transition
//! matrices, and a simulation harness that compares them.

pub mod chain;
pub mod error;
pub mod harness;
pub mod learning;
mod linalg;
pub mod planner;
pub mod policies;
pub mod predictor;

pub use chain::{ChainSpec, NStepTable};
pub use error::{Error, Result};
pub use learning::{EstimatorState, QueryObservation};
pub use planner::{PlanSolution, StageCost};
pub use policies::{Decision, PolicyConfig, PredictorMode, ThresholdVector};
pub use predictor::{MonitorState, Prediction, PredictionTable};
