//! TOML experiment configuration.
//!
//! Matrices are arrays of rows, one row per line:
//!
//! ```toml
//! transition = [
//!   [0.9, 0.1],
//!   [0.5, 0.5],
//! ]
//! loss = [
//!   [0.0, 1.0],
//!   [1.0, 0.0],
//! ]
//! query_cost = 1.4
//! max_inter_query = 10
//! ```
//!
//! Every other key is optional; see the field defaults below and
//! `configs/` for complete files.

use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::chain::{matrix_from_rows, presets, ChainSpec};
use crate::error::{Error, Result};
use crate::harness::simulate::{PolicyKind, RunSettings};
use crate::policies::PolicyConfig;

pub const DEFAULT_HORIZON: u64 = 100_000;
pub const DEFAULT_EPISODES: u64 = 20;
pub const DEFAULT_MAX_INTER_QUERY: usize = 10;
pub const DEFAULT_DELTA: usize = 2;
pub const DEFAULT_QUERY_COST: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl CostRange {
    /// Inclusive grid, values rounded to 12 decimals.
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.step.is_nan() || self.step <= 0.0 || self.stop < self.start {
            return Err(Error::Config(format!("bad cost range {self:?}")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n)
            .map(|i| ((self.start + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

impl Default for CostRange {
    fn default() -> Self {
        Self {
            start: 0.1,
            stop: 3.0,
            step: 0.05,
        }
    }
}

/// Randomly generated chains for the random-chain study.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomChains {
    #[serde(default = "default_random_states")]
    pub states: usize,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_random_states() -> usize {
    5
}

fn default_trials() -> u64 {
    30
}

impl Default for RandomChains {
    fn default() -> Self {
        Self {
            states: default_random_states(),
            trials: default_trials(),
            seed: 0,
        }
    }
}

/// PSGD convergence run: queries at a fixed cycle of gaps.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSettings {
    /// States of the random chain to learn when no inline matrix is given.
    #[serde(default = "default_learn_states")]
    pub states: usize,
    #[serde(default = "default_updates")]
    pub updates: u64,
    /// Gaps between queries, cycled. Must not exceed `max_inter_query`.
    #[serde(default = "default_gaps")]
    pub gaps: Vec<usize>,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
}

fn default_learn_states() -> usize {
    3
}

fn default_updates() -> u64 {
    100_000
}

fn default_gaps() -> Vec<usize> {
    vec![5]
}

fn default_record_every() -> u64 {
    1000
}

impl Default for LearnSettings {
    fn default() -> Self {
        Self {
            states: default_learn_states(),
            updates: default_updates(),
            gaps: default_gaps(),
            record_every: default_record_every(),
        }
    }
}

fn default_policies() -> Vec<PolicyKind> {
    vec![
        PolicyKind::Optimal,
        PolicyKind::Greedy,
        PolicyKind::Stationary,
        PolicyKind::Uniform,
        PolicyKind::PsgdGreedy,
    ]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Inline transition matrix. Required by every experiment except the
    /// random-chain study and a learning run on a random chain.
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    /// Defaults to the distance loss `|j - k|`.
    #[serde(default)]
    pub loss: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub initial_state: usize,
    #[serde(default = "default_query_cost")]
    pub query_cost: f64,
    /// Explicit cost grid; overrides `cost_range`.
    #[serde(default)]
    pub costs: Option<Vec<f64>>,
    #[serde(default)]
    pub cost_range: CostRange,
    #[serde(default = "default_max_inter_query")]
    pub max_inter_query: usize,
    #[serde(default = "default_delta")]
    pub delta: usize,
    /// Sampling intervals for the uniform sweep; defaults to `1..=N`.
    #[serde(default)]
    pub deltas: Option<Vec<usize>>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub random: RandomChains,
    #[serde(default)]
    pub learn: LearnSettings,
}

fn default_query_cost() -> f64 {
    DEFAULT_QUERY_COST
}

fn default_max_inter_query() -> usize {
    DEFAULT_MAX_INTER_QUERY
}

fn default_delta() -> usize {
    DEFAULT_DELTA
}

fn default_horizon() -> u64 {
    DEFAULT_HORIZON
}

fn default_episodes() -> u64 {
    DEFAULT_EPISODES
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Inline chain with the recurrent five-state example's settings.
    pub fn with_chain(spec: &ChainSpec) -> Self {
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            transition: Some(rows(spec.transition())),
            loss: Some(rows(spec.loss())),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        PolicyConfig::new(self.query_cost, self.max_inter_query)?;
        if self.delta == 0 || self.delta > self.max_inter_query {
            return Err(Error::Config(format!(
                "delta {} outside 1..={}",
                self.delta, self.max_inter_query
            )));
        }
        if let Some(deltas) = &self.deltas {
            if let Some(d) = deltas.iter().find(|&&d| d == 0 || d > self.max_inter_query) {
                return Err(Error::Config(format!("delta {d} outside 1..={}", self.max_inter_query)));
            }
        }
        for c in self.cost_grid()? {
            PolicyConfig::new(c, self.max_inter_query)?;
        }
        if self.learn.gaps.is_empty() || self.learn.gaps.iter().any(|&g| g == 0 || g > self.max_inter_query) {
            return Err(Error::Config(format!(
                "learn.gaps must be non-empty with entries in 1..={}",
                self.max_inter_query
            )));
        }
        if self.learn.record_every == 0 {
            return Err(Error::Config("learn.record_every must be >= 1".into()));
        }
        if self.random.states < 2 || self.learn.states < 2 {
            return Err(Error::TooFewStates(self.random.states.min(self.learn.states)));
        }
        if self.transition.is_some() {
            let spec = self.chain()?;
            if self.initial_state >= spec.num_states() {
                return Err(Error::InvalidState {
                    index: self.initial_state,
                    states: spec.num_states(),
                });
            }
        }
        Ok(())
    }

    pub fn loss_for(&self, states: usize) -> Result<Array2<f64>> {
        match &self.loss {
            Some(rows) => matrix_from_rows(rows),
            None => Ok(presets::distance_loss(states)),
        }
    }

    /// The inline chain.
    pub fn chain(&self) -> Result<ChainSpec> {
        let rows = self
            .transition
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `transition` matrix".into()))?;
        let transition = matrix_from_rows(rows)?;
        let loss = self.loss_for(transition.nrows())?;
        ChainSpec::new(transition, loss)
    }

    pub fn cost_grid(&self) -> Result<Vec<f64>> {
        match &self.costs {
            Some(c) if c.is_empty() => Err(Error::Config("`costs` is empty".into())),
            Some(c) => Ok(c.clone()),
            None => self.cost_range.values(),
        }
    }

    pub fn delta_grid(&self) -> Vec<usize> {
        self.deltas.clone().unwrap_or_else(|| (1..=self.max_inter_query).collect())
    }

    pub fn policy_config(&self, query_cost: f64) -> Result<PolicyConfig> {
        PolicyConfig::new(query_cost, self.max_inter_query)
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            horizon: self.horizon,
            episodes: self.episodes,
            seed: self.seed,
            initial_state: self.initial_state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.horizon, 100_000);
        assert_eq!(cfg.episodes, 20);
        assert_eq!(cfg.max_inter_query, 10);
        assert_eq!(cfg.delta, 2);
        let grid = cfg.cost_grid().unwrap();
        assert_eq!(grid.len(), 59);
        assert_eq!(grid[0], 0.1);
        assert_eq!(grid[1], 0.15);
        assert_eq!(*grid.last().unwrap(), 3.0);
        assert_eq!(cfg.delta_grid(), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn parses_inline_chain() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            transition = [
              [0.9, 0.1],
              [0.5, 0.5],
            ]
            query_cost = 0.3
            costs = [0.1, 0.2]
            policies = ["greedy", "uniform-hold"]
            "#,
        )
        .unwrap();
        let spec = cfg.chain().unwrap();
        assert_eq!(spec.num_states(), 2);
        assert_eq!(spec.loss()[[0, 1]], 1.0);
        assert_eq!(cfg.cost_grid().unwrap(), vec![0.1, 0.2]);
        assert_eq!(cfg.policies, vec![PolicyKind::Greedy, PolicyKind::UniformHold]);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "horizon = 0",
            "episodes = 0",
            "delta = 11",
            "query_cost = -1.0",
            "transition = [[0.5, 0.6], [0.5, 0.5]]",
            "transition = [[1.0, 0.0], [0.5, 0.5]]\ninitial_state = 2",
            "policies = [\"bogus\"]",
            "unknown_key = 3",
            "[learn]\ngaps = [11]",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn missing_chain_is_a_config_error() {
        assert!(matches!(ExperimentConfig::default().chain(), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_a_chain() {
        let spec = presets::recurrent_five_state();
        let cfg = ExperimentConfig::with_chain(&spec);
        assert_eq!(cfg.chain().unwrap(), spec);
    }
}
