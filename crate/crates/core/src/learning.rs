//! Learning the transition matrix from queries at irregular gaps.
//!
//! A query `n` slots after observing state `i` that reveals state `j` is
//! scored by `F = sum_k (y_k - (P^n)_{ik})^2` with `y` one-hot at `j`. The
//! gradient treats the `n` transitions as `n` layers sharing the weight
//! matrix: backpropagate through each layer and sum the per-layer
//! gradients. After each step the estimate is projected back onto
//! row-stochastic matrices by clamping negatives and renormalizing rows.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::chain::NStepTable;
use crate::error::{Error, Result};
use crate::policies::{greedy_rule, Decision, PolicyConfig};
use crate::predictor::{predict_from_distribution, MonitorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueryObservation {
    pub from_state: usize,
    pub gap: usize,
    pub observed: usize,
}

impl QueryObservation {
    pub fn new(from_state: usize, gap: usize, observed: usize) -> Self {
        Self {
            from_state,
            gap,
            observed,
        }
    }
}

/// Squared error between the one-hot outcome and row `from_state` of
/// `estimate^gap`.
pub fn squared_error_loss(estimate: &Array2<f64>, obs: &QueryObservation) -> f64 {
    let row = propagate(estimate, obs.from_state, obs.gap);
    row.iter()
        .enumerate()
        .map(|(k, p)| {
            let y = if k == obs.observed { 1.0 } else { 0.0 };
            (y - p).powi(2)
        })
        .sum()
}

fn propagate(estimate: &Array2<f64>, from: usize, steps: usize) -> Array1<f64> {
    let mut u = Array1::zeros(estimate.nrows());
    u[from] = 1.0;
    for _ in 0..steps {
        u = u.dot(estimate);
    }
    u
}

/// Gradient of [`squared_error_loss`] with respect to every entry of the
/// estimate, by reverse-mode accumulation over the unrolled layers.
pub fn squared_error_gradient(estimate: &Array2<f64>, obs: &QueryObservation) -> Array2<f64> {
    let k = estimate.nrows();
    let n = obs.gap;
    // forward[m] = e_i P^m, m = 0..=n
    let mut forward = Vec::with_capacity(n + 1);
    let mut u = Array1::zeros(k);
    u[obs.from_state] = 1.0;
    forward.push(u);
    for m in 0..n {
        let next = forward[m].dot(estimate);
        forward.push(next);
    }
    let mut residual = -&forward[n];
    residual[obs.observed] += 1.0;

    let mut grad = Array2::zeros((k, k));
    // layer m (1-based) sees input forward[m-1] and back-signal P^{n-m} r
    let mut back = residual;
    for m in (1..=n).rev() {
        for a in 0..k {
            let ua = forward[m - 1][a];
            if ua != 0.0 {
                for b in 0..k {
                    grad[[a, b]] += ua * back[b];
                }
            }
        }
        if m > 1 {
            back = estimate.dot(&back);
        }
    }
    grad *= -2.0;
    grad
}

/// Clamp negatives to zero and divide each row by its sum; rows with no
/// positive mass become uniform.
pub fn project_row_stochastic(matrix: &Array2<f64>) -> Array2<f64> {
    let k = matrix.ncols();
    let mut out = matrix.mapv(|v| v.max(0.0));
    for mut row in out.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    out
}

/// Current estimate, update counter and cached powers of the estimate up
/// to the inter-query cap.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    estimate: Array2<f64>,
    updates: u64,
    max_inter_query: usize,
    powers: NStepTable,
}

impl EstimatorState {
    /// Uniform `1/K` initial estimate.
    pub fn new(states: usize, max_inter_query: usize) -> Result<Self> {
        if states == 0 {
            return Err(Error::TooFewStates(0));
        }
        Self::with_estimate(Array2::from_elem((states, states), 1.0 / states as f64), max_inter_query)
    }

    pub fn with_estimate(estimate: Array2<f64>, max_inter_query: usize) -> Result<Self> {
        if max_inter_query == 0 {
            return Err(Error::Config("max inter-query time must be >= 1".into()));
        }
        let powers = NStepTable::new(&estimate, max_inter_query)?;
        Ok(Self {
            estimate,
            updates: 0,
            max_inter_query,
            powers,
        })
    }

    pub fn estimate(&self) -> &Array2<f64> {
        &self.estimate
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn num_states(&self) -> usize {
        self.estimate.nrows()
    }

    pub fn max_inter_query(&self) -> usize {
        self.max_inter_query
    }

    pub fn powers(&self) -> &NStepTable {
        &self.powers
    }

    /// Step size for the next update: `1 / (8 N K + m)` with `m` counting
    /// updates from 1.
    pub fn next_learning_rate(&self) -> f64 {
        let base = 8 * self.max_inter_query * self.num_states();
        1.0 / (base as f64 + (self.updates + 1) as f64)
    }

    fn check(&self, obs: &QueryObservation) -> Result<()> {
        let k = self.num_states();
        if obs.gap == 0 || obs.gap > self.max_inter_query {
            return Err(Error::HorizonExceeded {
                requested: obs.gap,
                horizon: self.max_inter_query,
            });
        }
        for index in [obs.from_state, obs.observed] {
            if index >= k {
                return Err(Error::InvalidState { index, states: k });
            }
        }
        Ok(())
    }

    pub fn loss(&self, obs: &QueryObservation) -> Result<f64> {
        self.check(obs)?;
        Ok(squared_error_loss(&self.estimate, obs))
    }

    pub fn gradient(&self, obs: &QueryObservation) -> Result<Array2<f64>> {
        self.check(obs)?;
        Ok(squared_error_gradient(&self.estimate, obs))
    }

    /// One projected gradient step. Returns the step size used.
    pub fn update(&mut self, obs: &QueryObservation) -> Result<f64> {
        let grad = self.gradient(obs)?;
        let eta = self.next_learning_rate();
        self.estimate = project_row_stochastic(&(&self.estimate - &(grad * eta)));
        self.updates += 1;
        self.powers = NStepTable::new(&self.estimate, self.max_inter_query)?;
        Ok(eta)
    }

    /// Frobenius distance to a reference matrix.
    pub fn distance_to(&self, truth: &Array2<f64>) -> f64 {
        (&self.estimate - truth).mapv(|d| d * d).sum().sqrt()
    }
}

pub fn prediction_loss_f(est: &EstimatorState, obs: &QueryObservation) -> Result<f64> {
    est.loss(obs)
}

pub fn gradient_f(est: &EstimatorState, obs: &QueryObservation) -> Result<Array2<f64>> {
    est.gradient(obs)
}

pub fn psgd_update(est: &EstimatorState, obs: &QueryObservation) -> Result<EstimatorState> {
    let mut next = est.clone();
    next.update(obs)?;
    Ok(next)
}

/// Greedy decision using the estimated n-step distribution.
pub fn pg_decide(est: &EstimatorState, loss: &Array2<f64>, cfg: &PolicyConfig, ms: MonitorState) -> Result<Decision> {
    if ms.elapsed >= cfg.max_inter_query {
        return Ok(Decision::Query);
    }
    let row = est.powers.row(ms.last_state, ms.elapsed)?;
    Ok(greedy_rule(predict_from_distribution(row, loss), cfg, ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::presets::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let p = absorbing_three_state().transition().clone();
        let est = EstimatorState::with_estimate(p, 10).unwrap();
        assert_eq!(est.loss(&QueryObservation::new(1, 5, 1)).unwrap(), 0.0);
        assert_abs_diff_eq!(est.loss(&QueryObservation::new(0, 1, 1)).unwrap(), 0.5, epsilon = 1e-15);

        let onehot = array![[0.0, 1.0], [0.3, 0.7]];
        let est = EstimatorState::with_estimate(onehot, 3).unwrap();
        assert_eq!(est.loss(&QueryObservation::new(0, 1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn single_layer_gradient() {
        let p = array![[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]];
        let obs = QueryObservation::new(2, 1, 0);
        let g = squared_error_gradient(&p, &obs);
        let expected = [-2.0 * (1.0 - 0.6), -2.0 * (0.0 - 0.3), -2.0 * (0.0 - 0.1)];
        for b in 0..3 {
            assert_abs_diff_eq!(g[[2, b]], expected[b], epsilon = 1e-15);
            assert_eq!(g[[0, b]], 0.0);
            assert_eq!(g[[1, b]], 0.0);
        }
    }

    #[test]
    fn zero_gradient_at_perfect_absorbing_prediction() {
        let p = absorbing_three_state().transition().clone();
        let g = squared_error_gradient(&p, &QueryObservation::new(1, 4, 1));
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_examples() {
        let m = array![[0.5, -0.2, 0.3], [0.2, 0.3, 0.5], [-1.0, -1.0, -3.0]];
        let p = project_row_stochastic(&m);
        assert_abs_diff_eq!(p[[0, 0]], 0.625, epsilon = 1e-15);
        assert_eq!(p[[0, 1]], 0.0);
        assert_abs_diff_eq!(p[[0, 2]], 0.375, epsilon = 1e-15);
        assert_eq!(p.row(1), m.row(1));
        for v in p.row(2) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = project_row_stochastic(&array![[-1.0, -1.0], [0.0, 1.0]]);
        assert_eq!(p.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn learning_rate_schedule() {
        let est = EstimatorState::new(5, 10).unwrap();
        assert_eq!(est.next_learning_rate(), 1.0 / 401.0);
        let mut est = est;
        let eta = est.update(&QueryObservation::new(0, 3, 2)).unwrap();
        assert_eq!(eta, 1.0 / 401.0);
        assert_eq!(est.updates(), 1);
        assert_eq!(est.next_learning_rate(), 1.0 / 402.0);
    }

    #[test]
    fn zero_gradient_leaves_estimate_unchanged() {
        let p = absorbing_three_state().transition().clone();
        let est = EstimatorState::with_estimate(p.clone(), 6).unwrap();
        let next = psgd_update(&est, &QueryObservation::new(2, 6, 2)).unwrap();
        assert_eq!(next.estimate(), &p);
        assert_eq!(next.updates(), 1);
    }

    #[test]
    fn gap_beyond_cap_is_rejected() {
        let est = EstimatorState::new(3, 4).unwrap();
        assert!(matches!(
            est.gradient(&QueryObservation::new(0, 5, 1)),
            Err(Error::HorizonExceeded { .. })
        ));
        assert!(matches!(
            est.loss(&QueryObservation::new(0, 2, 3)),
            Err(Error::InvalidState { .. })
        ));
    }

    #[test]
    fn updates_stay_row_stochastic() {
        let mut est = EstimatorState::new(4, 5).unwrap();
        let obs = [
            QueryObservation::new(0, 1, 3),
            QueryObservation::new(3, 5, 1),
            QueryObservation::new(1, 2, 1),
            QueryObservation::new(2, 4, 0),
        ];
        for _ in 0..200 {
            for o in &obs {
                est.update(o).unwrap();
                for row in est.estimate().rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn pg_decide_caps() {
        let est = EstimatorState::new(5, 10).unwrap();
        let cfg = PolicyConfig::new(100.0, 10).unwrap();
        assert_eq!(
            pg_decide(&est, recurrent_five_state().loss(), &cfg, MonitorState::new(2, 10)).unwrap(),
            Decision::Query
        );
        assert!(matches!(
            pg_decide(&est, recurrent_five_state().loss(), &cfg, MonitorState::new(2, 9)).unwrap(),
            Decision::Predict(_)
        ));
    }
}
