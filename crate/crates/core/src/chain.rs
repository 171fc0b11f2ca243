//! Finite-state Markov chains: validation, n-step transition tables,
//! stationary distributions, sampling and random generation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on row sums of a transition matrix.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Iteration cap for [`stationary_distribution`].
pub const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;

/// Ground-truth world model: transition matrix plus loss matrix.
///
/// Entry `(j, k)` of the loss matrix is the cost of predicting state `k`
/// while the source is in state `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    transition: Array2<f64>,
    loss: Array2<f64>,
}

impl ChainSpec {
    /// Validates both matrices and renormalizes each transition row so it
    /// sums to exactly one (inputs are accepted within [`ROW_SUM_TOLERANCE`]).
    pub fn new(transition: Array2<f64>, loss: Array2<f64>) -> Result<Self> {
        validate_parts(transition.view(), loss.view())?;
        let mut transition = transition;
        for mut row in transition.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|p| p / sum);
        }
        Ok(Self { transition, loss })
    }

    pub fn from_rows(transition: &[Vec<f64>], loss: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(transition)?, matrix_from_rows(loss)?)
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn loss(&self) -> &Array2<f64> {
        &self.loss
    }

    /// Same chain with a different loss matrix.
    pub fn with_loss(&self, loss: Array2<f64>) -> Result<Self> {
        Self::new(self.transition.clone(), loss)
    }

    pub fn validate(&self) -> Result<()> {
        validate(self)
    }

    /// Precomputes `P^n` for `n = 0..=horizon`.
    pub fn n_step_table(&self, horizon: usize) -> Result<NStepTable> {
        NStepTable::new(&self.transition, horizon)
    }
}

pub fn validate(spec: &ChainSpec) -> Result<()> {
    validate_parts(spec.transition.view(), spec.loss.view())
}

/// Checks every [`ChainSpec`] invariant on raw matrices.
pub fn validate_parts(transition: ArrayView2<f64>, loss: ArrayView2<f64>) -> Result<()> {
    let k = transition.nrows();
    if transition.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "transition matrix is {}x{}",
            k,
            transition.ncols()
        )));
    }
    if loss.dim() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "loss matrix is {}x{}, transition matrix is {k}x{k}",
            loss.nrows(),
            loss.ncols()
        )));
    }
    if k < 2 {
        return Err(Error::TooFewStates(k));
    }
    check_stochastic(transition)?;
    for ((row, col), &value) in loss.indexed_iter() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                matrix: "loss",
                row,
                col,
            });
        }
        if value < 0.0 {
            return Err(Error::NegativeEntry {
                matrix: "loss",
                row,
                col,
                value,
            });
        }
    }
    for i in 0..k {
        if loss[[i, i]] != 0.0 {
            return Err(Error::NonZeroDiagonal {
                index: i,
                value: loss[[i, i]],
            });
        }
    }
    Ok(())
}

/// Entries in `[0, 1]` and rows summing to one within [`ROW_SUM_TOLERANCE`].
pub fn check_stochastic(matrix: ArrayView2<f64>) -> Result<()> {
    for ((row, col), &value) in matrix.indexed_iter() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                matrix: "transition",
                row,
                col,
            });
        }
        if value < 0.0 {
            return Err(Error::NegativeEntry {
                matrix: "transition",
                row,
                col,
                value,
            });
        }
    }
    for ((row, col), &value) in matrix.indexed_iter() {
        if value > 1.0 {
            return Err(Error::ProbabilityOutOfRange {
                matrix: "transition",
                row,
                col,
                value,
            });
        }
    }
    for (row, r) in matrix.rows().into_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::RowSum {
                row,
                sum,
                tolerance: ROW_SUM_TOLERANCE,
            });
        }
    }
    Ok(())
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {i} has {} entries, row 0 has {ncols}",
            r.len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Matrix powers `P^0 = I, P^1 = P, ..., P^horizon`.
#[derive(Debug, Clone)]
pub struct NStepTable {
    powers: Vec<Array2<f64>>,
}

impl NStepTable {
    pub fn new(transition: &Array2<f64>, horizon: usize) -> Result<Self> {
        let k = transition.nrows();
        if transition.ncols() != k || k == 0 {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix is {}x{}",
                k,
                transition.ncols()
            )));
        }
        check_stochastic(transition.view())?;
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(Array2::eye(k));
        if horizon >= 1 {
            powers.push(transition.clone());
        }
        for n in 2..=horizon {
            let next = powers[n - 1].dot(transition);
            powers.push(next);
        }
        Ok(Self { powers })
    }

    pub fn num_states(&self) -> usize {
        self.powers[0].nrows()
    }

    pub fn horizon(&self) -> usize {
        self.powers.len() - 1
    }

    /// `P^n` for `0 <= n <= horizon`.
    pub fn power(&self, n: usize) -> Result<&Array2<f64>> {
        self.powers.get(n).ok_or(Error::HorizonExceeded {
            requested: n,
            horizon: self.horizon(),
        })
    }

    /// Row `i` of `P^n`: the distribution of the state `n` slots after
    /// observing state `i`.
    pub fn row(&self, i: usize, n: usize) -> Result<ArrayView1<'_, f64>> {
        let p = self.power(n)?;
        if i >= p.nrows() {
            return Err(Error::InvalidState {
                index: i,
                states: p.nrows(),
            });
        }
        Ok(p.row(i))
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.powers[1.min(self.horizon())]
    }
}

/// `P^n` by binary exponentiation.
pub fn n_step_probs(spec: &ChainSpec, n: usize) -> Array2<f64> {
    matrix_power(&spec.transition, n)
}

pub fn matrix_power(matrix: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut result = Array2::eye(matrix.nrows());
    let mut base = matrix.clone();
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            result = result.dot(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.dot(&base);
        }
    }
    result
}

/// Closed communicating classes of the directed graph `i -> j` iff
/// `matrix[i][j] > 0`, each sorted, ordered by smallest member.
pub fn closed_classes(matrix: &Array2<f64>) -> Vec<Vec<usize>> {
    let k = matrix.nrows();
    let mut reach = vec![vec![false; k]; k];
    for i in 0..k {
        reach[i][i] = true;
        for j in 0..k {
            if matrix[[i, j]] > 0.0 {
                reach[i][j] = true;
            }
        }
    }
    for m in 0..k {
        for i in 0..k {
            if reach[i][m] {
                for j in 0..k {
                    if reach[m][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut seen = vec![false; k];
    let mut classes = Vec::new();
    for i in 0..k {
        if seen[i] {
            continue;
        }
        let class: Vec<usize> = (0..k).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            seen[j] = true;
        }
        // closed iff everything reachable from i reaches back
        let closed = (0..k).all(|j| !reach[i][j] || reach[j][i]);
        if closed {
            classes.push(class);
        }
    }
    classes
}

/// Stationary distribution by power iteration on the lazy chain
/// `(I + P) / 2`, which shares its stationary vectors with `P` and is
/// aperiodic. Requires exactly one closed class.
pub fn stationary_distribution(spec: &ChainSpec, tol: f64) -> Result<Array1<f64>> {
    stationary_of(&spec.transition, tol, STATIONARY_MAX_ITERATIONS)
}

pub fn stationary_of(matrix: &Array2<f64>, tol: f64, max_iterations: usize) -> Result<Array1<f64>> {
    let closed = closed_classes(matrix).len();
    if closed != 1 {
        return Err(Error::StationaryNotUnique {
            closed_classes: closed,
        });
    }
    let k = matrix.nrows();
    let mut pi = Array1::from_elem(k, 1.0 / k as f64);
    for _ in 0..max_iterations {
        let next = pi.dot(matrix);
        let residual = next
            .iter()
            .zip(pi.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        if residual <= tol {
            return Ok(pi);
        }
        pi = (&pi + &next) * 0.5;
        let total = pi.sum();
        pi /= total;
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
    })
}

/// Draws an index from a probability row with a single uniform variate.
pub fn sample_row<R: Rng + ?Sized>(row: ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = j;
            if u < acc {
                return j;
            }
        }
    }
    // rounding left u above the accumulated mass
    last_positive
}

pub fn sample_next<R: Rng + ?Sized>(spec: &ChainSpec, current: usize, rng: &mut R) -> usize {
    sample_row(spec.transition.row(current), rng)
}

/// Random transition matrix: each row is `k` independent Uniform(0,1)
/// draws normalized to sum to one.
pub fn random_chain<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Array2<f64>> {
    if k < 2 {
        return Err(Error::TooFewStates(k));
    }
    let mut m = Array2::from_shape_simple_fn((k, k), || rng.random::<f64>());
    for mut row in m.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|p| p / sum);
    }
    Ok(m)
}

/// Ready-made chains used by the experiments and tests.
pub mod presets {
    use ndarray::{array, Array2};

    use super::ChainSpec;

    /// Loss `|j - k|` between state indices.
    pub fn distance_loss(k: usize) -> Array2<f64> {
        Array2::from_shape_fn((k, k), |(j, l)| (j as f64 - l as f64).abs())
    }

    /// Unit loss for any wrong prediction.
    pub fn zero_one_loss(k: usize) -> Array2<f64> {
        Array2::from_shape_fn((k, k), |(j, l)| if j == l { 0.0 } else { 1.0 })
    }

    /// Five-state recurrent, doubly stochastic chain with distance loss.
    pub fn recurrent_five_state() -> ChainSpec {
        let p = array![
            [0.5, 0.5, 0.0, 0.0, 0.0],
            [0.1, 0.1, 0.6, 0.2, 0.0],
            [0.2, 0.1, 0.0, 0.5, 0.2],
            [0.1, 0.2, 0.2, 0.0, 0.5],
            [0.1, 0.1, 0.2, 0.3, 0.3],
        ];
        ChainSpec::new(p, distance_loss(5)).expect("preset is valid")
    }

    /// Three-state idempotent chain: state 0 moves to 1 or 2 with equal
    /// probability, both of which are absorbing. Unit loss.
    pub fn absorbing_three_state() -> ChainSpec {
        let p = array![[0.0, 0.5, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        ChainSpec::new(p, zero_one_loss(3)).expect("preset is valid")
    }
}
