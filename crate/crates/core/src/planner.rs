//! Optimal state-dependent threshold policy.
//!
//! A threshold policy splits time into stages that start with a query. A
//! stage opened in state `i` lasts `mu[i]` slots and costs
//! `Lambda(i, mu[i]) = c + sum_{n < mu[i]} (optimal expected loss at n)`.
//! The queried states form an embedded chain with kernel `P^{mu[i]}`, which
//! turns the problem into an average-cost semi-Markov decision process:
//!
//! ```text
//! h(i) = Lambda(i, mu[i]) - gain * mu[i] + sum_j P^{mu[i]}(i, j) h(j),   h(0) = 0
//! ```
//!
//! [`policy_iteration`] alternates solving that system with a per-state
//! argmin over `m = 1..=N`. [`exhaustive_oracle`] enumerates every
//! threshold vector and scores it by renewal reward on the embedded chain,
//! which shares nothing with the linear-system route.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{closed_classes, NStepTable};
use crate::error::{Error, Result};
use crate::linalg;
use crate::policies::ThresholdVector;
use crate::predictor::expected_loss_profile;

pub const MAX_PI_ITERATIONS: usize = 1000;
pub const ORACLE_LIMIT: u128 = 10_000_000;
const IMPROVEMENT_TOLERANCE: f64 = 1e-10;

/// `Lambda(i, m)` for `m = 1..=N`.
#[derive(Debug, Clone)]
pub struct StageCost {
    query_cost: f64,
    // [i, m - 1]
    costs: Array2<f64>,
}

impl StageCost {
    pub fn get(&self, state: usize, m: usize) -> f64 {
        self.costs[[state, m - 1]]
    }

    pub fn max_threshold(&self) -> usize {
        self.costs.ncols()
    }

    pub fn num_states(&self) -> usize {
        self.costs.nrows()
    }

    pub fn query_cost(&self) -> f64 {
        self.query_cost
    }

    /// Expected prediction loss at elapsed `n`, for `1 <= n < N`.
    pub fn marginal_loss(&self, state: usize, n: usize) -> f64 {
        self.get(state, n + 1) - self.get(state, n)
    }
}

pub fn stage_costs(table: &NStepTable, loss: &Array2<f64>, c: f64, max_inter_query: usize) -> Result<StageCost> {
    if max_inter_query == 0 {
        return Err(Error::Config("max inter-query time must be >= 1".into()));
    }
    if max_inter_query > table.horizon() {
        return Err(Error::HorizonExceeded {
            requested: max_inter_query,
            horizon: table.horizon(),
        });
    }
    let k = table.num_states();
    let mut costs = Array2::zeros((k, max_inter_query));
    for i in 0..k {
        let profile = expected_loss_profile(table, loss, i, max_inter_query - 1)?;
        let mut acc = c;
        costs[[i, 0]] = acc;
        for (m, l) in profile.iter().enumerate() {
            acc += l;
            costs[[i, m + 1]] = acc;
        }
    }
    Ok(StageCost { query_cost: c, costs })
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSolution {
    pub thresholds: ThresholdVector,
    pub gain: f64,
    pub bias: Vec<f64>,
    pub iterations: usize,
    /// Gain of each evaluated policy, in order.
    pub gain_trace: Vec<f64>,
}

/// Solves the bias equations plus `h(0) = 0` for `(gain, bias)`.
pub fn evaluate_thresholds(table: &NStepTable, stage: &StageCost, mu: &ThresholdVector) -> Result<(f64, Vec<f64>)> {
    let k = stage.num_states();
    if mu.len() != k {
        return Err(Error::DimensionMismatch(format!("{} thresholds for {k} states", mu.len())));
    }
    // unknowns: h(0..k), gain
    let mut a = Array2::zeros((k + 1, k + 1));
    let mut b = Array1::zeros(k + 1);
    for i in 0..k {
        let m = mu.get(i);
        let row = table.row(i, m)?;
        for j in 0..k {
            a[[i, j]] -= row[j];
        }
        a[[i, i]] += 1.0;
        a[[i, k]] = m as f64;
        b[i] = stage.get(i, m);
    }
    a[[k, 0]] = 1.0;
    let x = linalg::solve(a, b)?;
    Ok((x[k], x.iter().take(k).copied().collect()))
}

fn stage_value(table: &NStepTable, stage: &StageCost, gain: f64, bias: &[f64], i: usize, m: usize) -> f64 {
    let row = table.row(i, m).expect("m within horizon");
    let next: f64 = row.iter().zip(bias).map(|(p, h)| p * h).sum();
    stage.get(i, m) - gain * m as f64 + next
}

/// Thresholds the greedy rule induces: query at the first elapsed time
/// whose expected loss reaches `c`, or at the cap.
pub fn greedy_thresholds(stage: &StageCost) -> ThresholdVector {
    let n_cap = stage.max_threshold();
    let mu = (0..stage.num_states())
        .map(|i| {
            (1..n_cap)
                .find(|&n| stage.marginal_loss(i, n) >= stage.query_cost())
                .unwrap_or(n_cap)
        })
        .collect();
    ThresholdVector::new(mu, n_cap).expect("thresholds within cap")
}

pub fn policy_iteration(table: &NStepTable, loss: &Array2<f64>, c: f64, max_inter_query: usize) -> Result<PlanSolution> {
    let stage = stage_costs(table, loss, c, max_inter_query)?;
    policy_iteration_with(table, &stage)
}

pub fn policy_iteration_with(table: &NStepTable, stage: &StageCost) -> Result<PlanSolution> {
    let n_cap = stage.max_threshold();
    let k = stage.num_states();
    let mut mu = greedy_thresholds(stage);
    let mut gain_trace = Vec::new();
    let mut best: Option<PlanSolution> = None;
    let mut seen = std::collections::HashSet::new();

    for iteration in 1..=MAX_PI_ITERATIONS {
        let (gain, bias) = evaluate_thresholds(table, stage, &mu)?;
        gain_trace.push(gain);
        let current = PlanSolution {
            thresholds: mu.clone(),
            gain,
            bias,
            iterations: iteration,
            gain_trace: gain_trace.clone(),
        };
        seen.insert(mu.clone());

        let mut next = Vec::with_capacity(k);
        for i in 0..k {
            let values: Vec<f64> = (1..=n_cap)
                .map(|m| stage_value(table, stage, gain, &current.bias, i, m))
                .collect();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let slack = IMPROVEMENT_TOLERANCE * (1.0 + min.abs());
            let held = mu.get(i);
            if values[held - 1] <= min + slack {
                next.push(held);
            } else {
                let m = values.iter().position(|&v| v <= min + slack).unwrap() + 1;
                next.push(m);
            }
        }
        let next = ThresholdVector::new(next, n_cap)?;

        let improves = best.as_ref().is_none_or(|b| {
            current.gain < b.gain - IMPROVEMENT_TOLERANCE
                || (current.gain <= b.gain + IMPROVEMENT_TOLERANCE && current.thresholds < b.thresholds)
        });
        if improves {
            best = Some(current.clone());
        }
        if next == mu {
            return Ok(current);
        }
        if seen.contains(&next) {
            // cycling among equal-gain policies: settle on the best seen
            let mut b = best.expect("at least one iterate");
            b.iterations = iteration;
            b.gain_trace = gain_trace;
            return Ok(b);
        }
        mu = next;
    }
    Err(Error::PolicyIterationStalled {
        iterations: MAX_PI_ITERATIONS,
        best: Box::new(best.expect("at least one iterate")),
    })
}

/// Long-run average cost of a threshold policy started in state 0, by
/// renewal reward over the embedded queried-state chain.
///
/// The occupation measure of the embedded chain from state 0 is found by
/// power iteration on its lazy version. Each closed class contributes its
/// own cost-per-slot ratio weighted by the probability of ending up there.
pub fn renewal_reward_gain(table: &NStepTable, stage: &StageCost, mu: &ThresholdVector) -> Result<f64> {
    let k = stage.num_states();
    let mut embedded = Array2::zeros((k, k));
    for i in 0..k {
        embedded.row_mut(i).assign(&table.row(i, mu.get(i))?);
    }
    let mut occupation = Array1::zeros(k);
    occupation[0] = 1.0;
    let mut converged = false;
    for _ in 0..crate::chain::STATIONARY_MAX_ITERATIONS {
        let stepped = occupation.dot(&embedded);
        let next = (&occupation + &stepped) * 0.5;
        let change = next
            .iter()
            .zip(occupation.iter())
            .fold(0.0_f64, |acc: f64, (a, b): (&f64, &f64)| acc.max((a - b).abs()));
        occupation = next;
        if change <= 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: crate::chain::STATIONARY_MAX_ITERATIONS,
        });
    }
    let mut gain = 0.0;
    for class in closed_classes(&embedded) {
        let weight: f64 = class.iter().map(|&i| occupation[i]).sum();
        if weight <= 0.0 {
            continue;
        }
        let cost: f64 = class.iter().map(|&i| occupation[i] * stage.get(i, mu.get(i))).sum();
        let slots: f64 = class.iter().map(|&i| occupation[i] * mu.get(i) as f64).sum();
        gain += weight * cost / slots;
    }
    Ok(gain)
}

/// Brute-force minimizer over `{1..=N}^K`, lexicographically smallest on
/// ties.
pub fn exhaustive_oracle(table: &NStepTable, loss: &Array2<f64>, c: f64, max_inter_query: usize) -> Result<PlanSolution> {
    let stage = stage_costs(table, loss, c, max_inter_query)?;
    exhaustive_oracle_with(table, &stage)
}

pub fn exhaustive_oracle_with(table: &NStepTable, stage: &StageCost) -> Result<PlanSolution> {
    let k = stage.num_states();
    let n_cap = stage.max_threshold();
    let candidates = (n_cap as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if candidates > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            candidates,
            limit: ORACLE_LIMIT,
        });
    }
    let decode = |mut index: usize| {
        let mut mu = vec![0; k];
        for slot in mu.iter_mut().rev() {
            *slot = index % n_cap + 1;
            index /= n_cap;
        }
        ThresholdVector::new(mu, n_cap).expect("decoded thresholds within cap")
    };
    let gains: Vec<f64> = (0..candidates as usize)
        .into_par_iter()
        .map(|idx| renewal_reward_gain(table, stage, &decode(idx)))
        .collect::<Result<_>>()?;

    let mut best_idx = 0;
    for (idx, &g) in gains.iter().enumerate().skip(1) {
        if g < gains[best_idx] - 1e-12 * (1.0 + gains[best_idx].abs()) {
            best_idx = idx;
        }
    }
    let thresholds = decode(best_idx);
    let bias = evaluate_thresholds(table, stage, &thresholds)?.1;
    Ok(PlanSolution {
        thresholds,
        gain: gains[best_idx],
        bias,
        iterations: candidates as usize,
        gain_trace: Vec::new(),
    })
}

/// Largest violation of `h(i) = Lambda(i, mu_i) - gain mu_i + sum_j P^{mu_i}(i,j) h(j)`.
pub fn bellman_residual(table: &NStepTable, stage: &StageCost, sol: &PlanSolution) -> f64 {
    (0..stage.num_states())
        .map(|i| {
            let v = stage_value(table, stage, sol.gain, &sol.bias, i, sol.thresholds.get(i));
            (v - sol.bias[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest amount by which some `m` undercuts `h(i)`; zero when the bias
/// certifies optimality.
pub fn optimality_violation(table: &NStepTable, stage: &StageCost, sol: &PlanSolution) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..stage.num_states() {
        for m in 1..=stage.max_threshold() {
            let v = stage_value(table, stage, sol.gain, &sol.bias, i, m);
            worst = worst.max(sol.bias[i] - v);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::presets::*;
    use crate::chain::{random_chain, stationary_of, ChainSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_cost_examples() {
        let spec = absorbing_three_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 1.0, 10).unwrap();
        for i in 0..3 {
            assert_eq!(stage.get(i, 1), 1.0);
        }
        assert_eq!(stage.get(0, 3), 2.0);
        for m in 1..=10 {
            assert_eq!(stage.get(1, m), 1.0);
            assert_eq!(stage.get(2, m), 1.0);
        }
        assert!(matches!(
            stage_costs(&table, spec.loss(), 1.0, 11),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn stage_costs_are_nondecreasing() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 0.7, 10).unwrap();
        for i in 0..5 {
            for m in 1..10 {
                assert!(stage.get(i, m + 1) >= stage.get(i, m));
            }
        }
    }

    #[test]
    fn query_every_slot_costs_c() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 1.3, 10).unwrap();
        let (gain, bias) = evaluate_thresholds(&table, &stage, &ThresholdVector::uniform(5, 1)).unwrap();
        assert_abs_diff_eq!(gain, 1.3, epsilon = 1e-12);
        assert_eq!(bias[0], 0.0);
    }

    #[test]
    fn absorbing_chain_evaluation() {
        // after the first stage each absorbing class pays c = 1 per 10 slots
        let spec = absorbing_three_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 1.0, 10).unwrap();
        let mu = ThresholdVector::new(vec![1, 10, 10], 10).unwrap();
        let (gain, _) = evaluate_thresholds(&table, &stage, &mu).unwrap();
        assert_abs_diff_eq!(gain, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(renewal_reward_gain(&table, &stage, &mu).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn absorbing_classes_with_different_gains_are_singular() {
        let spec = absorbing_three_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 1.0, 10).unwrap();
        let mu = ThresholdVector::new(vec![1, 10, 5], 10).unwrap();
        assert!(matches!(
            evaluate_thresholds(&table, &stage, &mu),
            Err(Error::SingularSystem(_))
        ));
        // renewal reward still averages the two classes
        assert_abs_diff_eq!(
            renewal_reward_gain(&table, &stage, &mu).unwrap(),
            0.5 * 0.1 + 0.5 * 0.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_state_renewal_reward_by_hand() {
        // Embedded chain stationary vector from an independent power iteration,
        // then gain = sum pi Lambda / sum pi mu.
        let spec = ChainSpec::new(array![[0.9, 0.1], [0.4, 0.6]], zero_one_loss(2)).unwrap();
        let table = spec.n_step_table(6).unwrap();
        let stage = stage_costs(&table, spec.loss(), 0.8, 6).unwrap();
        for mu in [[1, 1], [2, 3], [6, 1], [4, 4]] {
            let mu = ThresholdVector::new(mu.to_vec(), 6).unwrap();
            let mut embedded = Array2::zeros((2, 2));
            for i in 0..2 {
                embedded.row_mut(i).assign(&table.row(i, mu.get(i)).unwrap());
            }
            let pi = stationary_of(&embedded, 1e-15, 1_000_000).unwrap();
            let expected = (pi[0] * stage.get(0, mu.get(0)) + pi[1] * stage.get(1, mu.get(1)))
                / (pi[0] * mu.get(0) as f64 + pi[1] * mu.get(1) as f64);
            let (gain, bias) = evaluate_thresholds(&table, &stage, &mu).unwrap();
            assert_abs_diff_eq!(gain, expected, epsilon = 1e-12);
            assert_eq!(bias[0], 0.0);
        }
    }

    #[test]
    fn zero_loss_waits_for_the_cap() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(10).unwrap();
        let sol = policy_iteration(&table, &Array2::zeros((5, 5)), 1.5, 10).unwrap();
        assert_eq!(sol.thresholds, ThresholdVector::uniform(5, 10));
        assert_abs_diff_eq!(sol.gain, 0.15, epsilon = 1e-12);
    }

    #[test]
    fn absorbing_chain_plan() {
        let spec = absorbing_three_state();
        let table = spec.n_step_table(10).unwrap();
        let sol = policy_iteration(&table, spec.loss(), 1.0, 10).unwrap();
        assert_eq!(sol.thresholds.as_slice(), &[1, 10, 10]);
        assert_abs_diff_eq!(sol.gain, 0.1, epsilon = 1e-12);
        assert_eq!(sol.bias[0], 0.0);

        let oracle = exhaustive_oracle(&table, spec.loss(), 1.0, 10).unwrap();
        assert_abs_diff_eq!(oracle.gain, 0.1, epsilon = 1e-12);
        assert_eq!(oracle.thresholds.as_slice(), &[1, 10, 10]);
    }

    #[test]
    fn single_state_oracle() {
        // with one state: mu = argmin Lambda(0, m) / m
        let p = array![[1.0]];
        let loss = array![[0.0]];
        let table = NStepTable::new(&p, 7).unwrap();
        let sol = exhaustive_oracle(&table, &loss, 2.0, 7).unwrap();
        assert_eq!(sol.thresholds.as_slice(), &[7]);
        assert_abs_diff_eq!(sol.gain, 2.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_guard() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(30).unwrap();
        assert!(matches!(
            exhaustive_oracle(&table, spec.loss(), 1.0, 30),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn recurrent_plan_satisfies_residuals_and_beats_greedy() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(10).unwrap();
        let stage = stage_costs(&table, spec.loss(), 1.4, 10).unwrap();
        let sol = policy_iteration_with(&table, &stage).unwrap();
        assert!(bellman_residual(&table, &stage, &sol) < 1e-8);
        assert!(optimality_violation(&table, &stage, &sol) < 1e-8);
        let (greedy_gain, _) = evaluate_thresholds(&table, &stage, &greedy_thresholds(&stage)).unwrap();
        assert!(sol.gain <= greedy_gain + 1e-12);
        let oracle = exhaustive_oracle_with(&table, &stage).unwrap();
        assert_abs_diff_eq!(sol.gain, oracle.gain, epsilon = 1e-9);
    }

    #[test]
    fn gain_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..40 {
            let k = rng.random_range(2..=5);
            let n_cap = rng.random_range(2..=12);
            let p = random_chain(k, &mut rng).unwrap();
            let table = NStepTable::new(&p, n_cap).unwrap();
            let c = rng.random_range(0.1..3.0);
            let sol = policy_iteration(&table, &distance_loss(k), c, n_cap).unwrap();
            for w in sol.gain_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{:?}", sol.gain_trace);
            }
        }
    }

    #[test]
    fn thresholds_grow_with_query_cost() {
        let spec = recurrent_five_state();
        let table = spec.n_step_table(10).unwrap();
        let mut previous = ThresholdVector::uniform(5, 1);
        for step in 0..=60 {
            let c = 0.05 * step as f64;
            let sol = policy_iteration(&table, spec.loss(), c, 10).unwrap();
            for i in 0..5 {
                assert!(
                    sol.thresholds.get(i) >= previous.get(i),
                    "c = {c}: {} after {}",
                    sol.thresholds,
                    previous
                );
            }
            previous = sol.thresholds;
        }
    }
}
