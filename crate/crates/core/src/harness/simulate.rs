use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{sample_row, stationary_distribution, ChainSpec, NStepTable};
use crate::error::{Error, Result};
use crate::learning::{pg_decide, EstimatorState, QueryObservation};
use crate::planner::{policy_iteration_with, stage_costs, PlanSolution};
use crate::policies::{
    greedy_decide, stationary_decide, threshold_decide, uniform_decide, Decision, PolicyConfig, PredictorMode,
    ThresholdVector,
};
use crate::predictor::{MonitorState, PredictionTable};

/// Tolerance used when the stationary heuristic needs the stationary vector.
pub const STATIONARY_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Optimal,
    Greedy,
    Stationary,
    Uniform,
    UniformHold,
    PsgdGreedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Optimal,
        PolicyKind::Greedy,
        PolicyKind::Stationary,
        PolicyKind::Uniform,
        PolicyKind::UniformHold,
        PolicyKind::PsgdGreedy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Optimal => "optimal",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Stationary => "stationary",
            PolicyKind::Uniform => "uniform",
            PolicyKind::UniformHold => "uniform-hold",
            PolicyKind::PsgdGreedy => "psgd-greedy",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy '{s}'")))
    }
}

/// A runnable policy. Everything except [`Policy::PsgdGreedy`] is a pure
/// function of the monitor state.
#[derive(Debug, Clone)]
pub enum Policy {
    Greedy {
        predictions: Arc<PredictionTable>,
        cfg: PolicyConfig,
    },
    Uniform {
        delta: usize,
        mode: PredictorMode,
        predictions: Arc<PredictionTable>,
        cfg: PolicyConfig,
    },
    Stationary {
        stationary: Array1<f64>,
        loss: Arc<Array2<f64>>,
        cfg: PolicyConfig,
    },
    Threshold {
        thresholds: ThresholdVector,
        predictions: Arc<PredictionTable>,
    },
    PsgdGreedy {
        estimator: EstimatorState,
        loss: Arc<Array2<f64>>,
        cfg: PolicyConfig,
    },
}

impl Policy {
    pub fn decide(&self, ms: MonitorState) -> Result<Decision> {
        match self {
            Policy::Greedy { predictions, cfg } => greedy_decide(predictions, cfg, ms),
            Policy::Uniform {
                delta,
                mode,
                predictions,
                cfg,
            } => uniform_decide(*delta, cfg, ms, *mode, predictions),
            Policy::Stationary { stationary, loss, cfg } => Ok(stationary_decide(stationary.view(), loss, cfg, ms)),
            Policy::Threshold {
                thresholds,
                predictions,
            } => threshold_decide(thresholds, predictions, ms),
            Policy::PsgdGreedy { estimator, loss, cfg } => pg_decide(estimator, loss, cfg, ms),
        }
    }

    /// Feedback after a query `obs.gap` slots after the previous one.
    pub fn observe(&mut self, obs: &QueryObservation) -> Result<()> {
        if let Policy::PsgdGreedy { estimator, .. } = self {
            estimator.update(obs)?;
        }
        Ok(())
    }
}

/// Chain plus query cost and cap, with the tables every policy needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    spec: ChainSpec,
    cfg: PolicyConfig,
    table: NStepTable,
    predictions: Arc<PredictionTable>,
    loss: Arc<Array2<f64>>,
}

impl Scenario {
    pub fn new(spec: ChainSpec, cfg: PolicyConfig) -> Result<Self> {
        let table = spec.n_step_table(cfg.max_inter_query)?;
        let predictions = Arc::new(PredictionTable::build(&table, spec.loss()));
        let loss = Arc::new(spec.loss().clone());
        Ok(Self {
            spec,
            cfg,
            table,
            predictions,
            loss,
        })
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn table(&self) -> &NStepTable {
        &self.table
    }

    pub fn plan(&self) -> Result<PlanSolution> {
        let stage = stage_costs(&self.table, self.spec.loss(), self.cfg.query_cost, self.cfg.max_inter_query)?;
        policy_iteration_with(&self.table, &stage)
    }

    pub fn threshold_policy(&self, thresholds: ThresholdVector) -> Result<Policy> {
        if thresholds.len() != self.spec.num_states() {
            return Err(Error::DimensionMismatch(format!(
                "{} thresholds for {} states",
                thresholds.len(),
                self.spec.num_states()
            )));
        }
        let thresholds = ThresholdVector::new(thresholds.as_slice().to_vec(), self.cfg.max_inter_query)?;
        Ok(Policy::Threshold {
            thresholds,
            predictions: self.predictions.clone(),
        })
    }

    /// Builds a policy; `delta` is only used by the uniform variants.
    pub fn policy(&self, kind: PolicyKind, delta: usize) -> Result<Policy> {
        let cfg = self.cfg;
        if matches!(kind, PolicyKind::Uniform | PolicyKind::UniformHold) && (delta == 0 || delta > cfg.max_inter_query) {
            return Err(Error::Config(format!(
                "sampling interval {delta} outside 1..={}",
                cfg.max_inter_query
            )));
        }
        Ok(match kind {
            PolicyKind::Optimal => return self.threshold_policy(self.plan()?.thresholds),
            PolicyKind::Greedy => Policy::Greedy {
                predictions: self.predictions.clone(),
                cfg,
            },
            PolicyKind::Stationary => Policy::Stationary {
                stationary: stationary_distribution(&self.spec, STATIONARY_TOLERANCE)?,
                loss: self.loss.clone(),
                cfg,
            },
            PolicyKind::Uniform => Policy::Uniform {
                delta,
                mode: PredictorMode::Optimal,
                predictions: self.predictions.clone(),
                cfg,
            },
            PolicyKind::UniformHold => Policy::Uniform {
                delta,
                mode: PredictorMode::HoldLast,
                predictions: self.predictions.clone(),
                cfg,
            },
            PolicyKind::PsgdGreedy => Policy::PsgdGreedy {
                estimator: EstimatorState::new(self.spec.num_states(), cfg.max_inter_query)?,
                loss: self.loss.clone(),
                cfg,
            },
        })
    }
}

/// Running totals for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostLedger {
    pub query_cost: f64,
    pub total_prediction_loss: f64,
    pub queries: u64,
    pub slots: u64,
}

impl CostLedger {
    pub fn new(query_cost: f64) -> Self {
        Self {
            query_cost,
            total_prediction_loss: 0.0,
            queries: 0,
            slots: 0,
        }
    }

    pub fn total_query_cost(&self) -> f64 {
        self.queries as f64 * self.query_cost
    }

    pub fn total_cost(&self) -> f64 {
        self.total_prediction_loss + self.total_query_cost()
    }

    /// Realized sum average cost.
    pub fn average(&self) -> f64 {
        self.total_cost() / self.slots as f64
    }

    pub fn queries_per_slot(&self) -> f64 {
        self.queries as f64 / self.slots as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Query,
    Predict,
}

/// One slot of a detailed trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotRecord {
    pub t: u64,
    pub state: usize,
    pub action: Action,
    pub predicted: Option<usize>,
    pub loss: f64,
    pub cumulative_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub ledger: CostLedger,
    pub trace: Option<Vec<SlotRecord>>,
}

/// Runs `horizon` slots `t = 0..horizon`. Slot 0 is a forced query of
/// `initial_state`. Each later slot advances the source with one uniform
/// draw, so every policy sees the same state path for a given seed.
pub fn simulate<R: Rng + ?Sized>(
    spec: &ChainSpec,
    policy: &mut Policy,
    query_cost: f64,
    horizon: u64,
    initial_state: usize,
    rng: &mut R,
    record_trace: bool,
) -> Result<SimulationOutcome> {
    let k = spec.num_states();
    if initial_state >= k {
        return Err(Error::InvalidState {
            index: initial_state,
            states: k,
        });
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let transition = spec.transition();
    let loss = spec.loss();
    let mut ledger = CostLedger::new(query_cost);
    let mut trace = record_trace.then(|| Vec::with_capacity(horizon.min(1 << 20) as usize));

    let mut state = initial_state;
    ledger.queries += 1;
    ledger.slots += 1;
    if let Some(tr) = trace.as_mut() {
        tr.push(SlotRecord {
            t: 0,
            state,
            action: Action::Query,
            predicted: None,
            loss: 0.0,
            cumulative_cost: ledger.total_cost(),
        });
    }
    let mut ms = MonitorState::new(state, 0);

    for t in 1..horizon {
        state = sample_row(transition.row(state), rng);
        ms.elapsed += 1;
        let decision = policy.decide(ms)?;
        ledger.slots += 1;
        let (action, predicted, slot_loss) = match decision {
            Decision::Query => {
                ledger.queries += 1;
                policy.observe(&QueryObservation::new(ms.last_state, ms.elapsed, state))?;
                ms = MonitorState::new(state, 0);
                (Action::Query, None, 0.0)
            }
            Decision::Predict(k_hat) => {
                let l = loss[[state, k_hat]];
                ledger.total_prediction_loss += l;
                (Action::Predict, Some(k_hat), l)
            }
        };
        if let Some(tr) = trace.as_mut() {
            tr.push(SlotRecord {
                t,
                state,
                action,
                predicted,
                loss: slot_loss,
                cumulative_cost: ledger.total_cost(),
            });
        }
    }
    Ok(SimulationOutcome { ledger, trace })
}

/// Random source for one episode: the master seed picks the ChaCha key and
/// `(grid index, episode)` picks the stream.
pub fn episode_rng(master_seed: u64, grid_index: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((grid_index << 32) | (episode & 0xffff_ffff));
    rng
}

/// Mean and standard error of per-episode averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub mean: f64,
    pub stderr: f64,
    pub queries_per_slot: f64,
    pub per_episode: Vec<f64>,
}

impl EpisodeSummary {
    pub fn from_ledgers(ledgers: &[CostLedger]) -> Self {
        let n = ledgers.len() as f64;
        let per_episode: Vec<f64> = ledgers.iter().map(CostLedger::average).collect();
        let mean = per_episode.iter().sum::<f64>() / n;
        let stderr = if ledgers.len() > 1 {
            let var = per_episode.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let queries_per_slot = ledgers.iter().map(CostLedger::queries_per_slot).sum::<f64>() / n;
        Self {
            mean,
            stderr,
            queries_per_slot,
            per_episode,
        }
    }
}

/// Episode settings shared by every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSettings {
    pub horizon: u64,
    pub episodes: u64,
    pub seed: u64,
    pub initial_state: usize,
}

/// Runs independent episodes in parallel from fresh clones of `policy`.
/// Episode `e` uses [`episode_rng`]`(seed, grid_index, e)` regardless of
/// the policy, giving common random numbers across policies.
pub fn run_episodes(spec: &ChainSpec, policy: &Policy, query_cost: f64, run: &RunSettings, grid_index: u64) -> Result<EpisodeSummary> {
    if run.episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let ledgers = (0..run.episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = episode_rng(run.seed, grid_index, e);
            let mut p = policy.clone();
            simulate(spec, &mut p, query_cost, run.horizon, run.initial_state, &mut rng, false).map(|o| o.ledger)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeSummary::from_ledgers(&ledgers))
}
