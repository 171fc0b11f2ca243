//! Query-or-predict decision rules: greedy, uniform sampling (with optimal
//! or hold-last prediction), the stationary-distribution heuristic, and
//! state-dependent thresholds.

use std::fmt;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{predict_from_distribution, MonitorState, Prediction, PredictionTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Query,
    Predict(usize),
}

/// Query cost and the cap on slots between queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub query_cost: f64,
    pub max_inter_query: usize,
}

impl PolicyConfig {
    pub fn new(query_cost: f64, max_inter_query: usize) -> Result<Self> {
        if !(query_cost.is_finite() && query_cost >= 0.0) {
            return Err(Error::Config(format!("query cost must be finite and >= 0, got {query_cost}")));
        }
        if max_inter_query == 0 {
            return Err(Error::Config("max inter-query time must be >= 1".into()));
        }
        Ok(Self {
            query_cost,
            max_inter_query,
        })
    }

    fn capped(&self, ms: MonitorState) -> bool {
        ms.elapsed >= self.max_inter_query
    }
}

/// Per-state inter-query times; state `i` is queried again exactly
/// `mu[i]` slots after it was observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdVector(Vec<usize>);

impl ThresholdVector {
    pub fn new(mu: Vec<usize>, max_inter_query: usize) -> Result<Self> {
        if let Some((i, &m)) = mu.iter().enumerate().find(|(_, &m)| m == 0 || m > max_inter_query) {
            return Err(Error::Config(format!(
                "threshold for state {i} is {m}, must lie in 1..={max_inter_query}"
            )));
        }
        Ok(Self(mu))
    }

    pub fn uniform(states: usize, mu: usize) -> Self {
        Self(vec![mu; states])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, state: usize) -> usize {
        self.0[state]
    }
}

impl fmt::Display for ThresholdVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    Optimal,
    HoldLast,
}

/// Predict iff the expected loss is strictly below the query cost, unless
/// the cap forces a query.
pub fn greedy_rule(prediction: Prediction, cfg: &PolicyConfig, ms: MonitorState) -> Decision {
    if cfg.capped(ms) || prediction.expected_loss >= cfg.query_cost {
        Decision::Query
    } else {
        Decision::Predict(prediction.state)
    }
}

pub fn greedy_decide(predictions: &PredictionTable, cfg: &PolicyConfig, ms: MonitorState) -> Result<Decision> {
    if cfg.capped(ms) {
        return Ok(Decision::Query);
    }
    Ok(greedy_rule(predictions.get(ms)?, cfg, ms))
}

/// Query every `delta` slots. Between queries predict optimally, or repeat
/// the last observed state in [`PredictorMode::HoldLast`].
pub fn uniform_decide(
    delta: usize,
    cfg: &PolicyConfig,
    ms: MonitorState,
    mode: PredictorMode,
    predictions: &PredictionTable,
) -> Result<Decision> {
    if ms.elapsed >= delta || cfg.capped(ms) {
        return Ok(Decision::Query);
    }
    Ok(match mode {
        PredictorMode::Optimal => Decision::Predict(predictions.get(ms)?.state),
        PredictorMode::HoldLast => Decision::Predict(ms.last_state),
    })
}

/// Greedy rule with the n-step distribution replaced by the stationary one.
pub fn stationary_decide(
    stationary: ArrayView1<f64>,
    loss: &Array2<f64>,
    cfg: &PolicyConfig,
    ms: MonitorState,
) -> Decision {
    greedy_rule(predict_from_distribution(stationary, loss), cfg, ms)
}

pub fn threshold_decide(mu: &ThresholdVector, predictions: &PredictionTable, ms: MonitorState) -> Result<Decision> {
    if ms.elapsed >= mu.get(ms.last_state) {
        return Ok(Decision::Query);
    }
    Ok(Decision::Predict(predictions.get(ms)?.state))
}
