//! Minimum expected-loss prediction of the current state from the last
//! queried state and the time elapsed since that query.

use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::chain::NStepTable;
use crate::error::{Error, Result};

/// Information available to the monitor between queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MonitorState {
    pub last_state: usize,
    /// Slots since the last query. Zero only on the query slot itself.
    pub elapsed: usize,
}

impl MonitorState {
    pub fn new(last_state: usize, elapsed: usize) -> Self {
        Self {
            last_state,
            elapsed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub state: usize,
    pub expected_loss: f64,
}

/// Picks `k` minimizing `sum_j dist[j] * loss[j][k]`. Ties go to the lowest
/// index; values are compared exactly.
pub fn predict_from_distribution(dist: ArrayView1<f64>, loss: &Array2<f64>) -> Prediction {
    let mut best = Prediction {
        state: 0,
        expected_loss: f64::INFINITY,
    };
    for k in 0..loss.ncols() {
        let expected: f64 = dist.iter().zip(loss.column(k)).map(|(p, l)| p * l).sum();
        if expected < best.expected_loss {
            best = Prediction {
                state: k,
                expected_loss: expected,
            };
        }
    }
    best
}

pub fn optimal_prediction(table: &NStepTable, loss: &Array2<f64>, ms: MonitorState) -> Result<Prediction> {
    let row = table.row(ms.last_state, ms.elapsed)?;
    Ok(predict_from_distribution(row, loss))
}

/// Optimal expected loss from state `i` at elapsed `1..=n_max`; entry
/// `n - 1` corresponds to elapsed `n`.
pub fn expected_loss_profile(table: &NStepTable, loss: &Array2<f64>, i: usize, n_max: usize) -> Result<Vec<f64>> {
    if n_max > table.horizon() {
        return Err(Error::HorizonExceeded {
            requested: n_max,
            horizon: table.horizon(),
        });
    }
    (1..=n_max)
        .map(|n| optimal_prediction(table, loss, MonitorState::new(i, n)).map(|p| p.expected_loss))
        .collect()
}

/// Optimal predictions for every `(state, elapsed)` pair up to a horizon,
/// computed once so that per-slot decisions are lookups.
#[derive(Debug, Clone)]
pub struct PredictionTable {
    horizon: usize,
    states: usize,
    // indexed [elapsed * states + state]
    entries: Vec<Prediction>,
}

impl PredictionTable {
    pub fn build(table: &NStepTable, loss: &Array2<f64>) -> Self {
        let states = table.num_states();
        let horizon = table.horizon();
        let mut entries = Vec::with_capacity((horizon + 1) * states);
        for n in 0..=horizon {
            let power = table.power(n).expect("n within horizon");
            for i in 0..states {
                entries.push(predict_from_distribution(power.row(i), loss));
            }
        }
        Self {
            horizon,
            states,
            entries,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn get(&self, ms: MonitorState) -> Result<Prediction> {
        if ms.elapsed > self.horizon {
            return Err(Error::HorizonExceeded {
                requested: ms.elapsed,
                horizon: self.horizon,
            });
        }
        if ms.last_state >= self.states {
            return Err(Error::InvalidState {
                index: ms.last_state,
                states: self.states,
            });
        }
        Ok(self.entries[ms.elapsed * self.states + ms.last_state])
    }
}
