//! Experiment drivers. Each returns plain rows that serialize to the CSV
//! schemas documented in the README.

use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{presets, random_chain, sample_row, ChainSpec};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::simulate::{run_episodes, PolicyKind, RunSettings, Scenario};
use crate::learning::{EstimatorState, QueryObservation};
use crate::planner::PlanSolution;
use crate::policies::{PolicyConfig, ThresholdVector};

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Random source for generating the chain of a random-study trial; kept on
/// streams disjoint from the episode streams.
pub fn chain_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - trial);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSweepRow {
    pub c: f64,
    pub policy: PolicyKind,
    pub gamma: f64,
    pub stderr: f64,
    pub queries_per_slot: f64,
}

/// Realized sum average cost of every configured policy at every query
/// cost. Policies at the same cost share episode seeds.
pub fn run_cost_sweep(cfg: &ExperimentConfig) -> Result<Vec<CostSweepRow>> {
    let spec = cfg.chain()?;
    let grid = cfg.cost_grid()?;
    let run = cfg.run_settings();
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(g, &c)| -> Result<Vec<CostSweepRow>> {
            let scenario = Scenario::new(spec.clone(), cfg.policy_config(c)?)?;
            let mut rows = Vec::new();
            for &kind in &cfg.policies {
                let policy = match scenario.policy(kind, cfg.delta) {
                    Ok(p) => p,
                    Err(e @ (Error::StationaryNotUnique { .. } | Error::NoConvergence { .. }))
                        if kind == PolicyKind::Stationary =>
                    {
                        warn!("skipping {kind} at c = {c}: {e}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let s = run_episodes(&spec, &policy, c, &run, g as u64)?;
                rows.push(CostSweepRow {
                    c,
                    policy: kind,
                    gamma: s.mean,
                    stderr: s.stderr,
                    queries_per_slot: s.queries_per_slot,
                });
            }
            info!("c = {c} done");
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformSweepRow {
    /// Empty for the reference policies.
    pub delta: Option<usize>,
    pub variant: PolicyKind,
    pub gamma: f64,
    pub stderr: f64,
}

/// Uniform sampling with optimal and hold-last prediction for each
/// sampling interval at the configured query cost, followed by reference
/// rows for the optimal, greedy and stationary policies.
pub fn run_uniform_sweep(cfg: &ExperimentConfig) -> Result<Vec<UniformSweepRow>> {
    let spec = cfg.chain()?;
    let c = cfg.query_cost;
    let scenario = Scenario::new(spec.clone(), cfg.policy_config(c)?)?;
    let run = cfg.run_settings();

    let mut jobs: Vec<(Option<usize>, PolicyKind)> = cfg
        .delta_grid()
        .into_iter()
        .flat_map(|d| [(Some(d), PolicyKind::Uniform), (Some(d), PolicyKind::UniformHold)])
        .collect();
    jobs.extend([PolicyKind::Optimal, PolicyKind::Greedy, PolicyKind::Stationary].map(|k| (None, k)));

    let rows = jobs
        .par_iter()
        .map(|&(delta, kind)| -> Result<Option<UniformSweepRow>> {
            let policy = match scenario.policy(kind, delta.unwrap_or(1)) {
                Ok(p) => p,
                Err(e @ (Error::StationaryNotUnique { .. } | Error::NoConvergence { .. }))
                    if kind == PolicyKind::Stationary =>
                {
                    warn!("skipping {kind}: {e}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let s = run_episodes(&spec, &policy, c, &run, 0)?;
            Ok(Some(UniformSweepRow {
                delta,
                variant: kind,
                gamma: s.mean,
                stderr: s.stderr,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomStudyRow {
    pub trial: u64,
    pub policy: PolicyKind,
    pub gamma: f64,
    #[serde(skip)]
    pub stderr: f64,
}

/// Draws `random.trials` chains with `random.states` states, plans the
/// optimal thresholds for each and simulates every configured policy.
pub fn run_random_chain_study(cfg: &ExperimentConfig) -> Result<Vec<RandomStudyRow>> {
    let k = cfg.random.states;
    let loss = cfg.loss_for(k)?;
    let pc = cfg.policy_config(cfg.query_cost)?;
    let run = cfg.run_settings();
    let rows = (0..cfg.random.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<RandomStudyRow>> {
            let p = random_chain(k, &mut chain_rng(cfg.random.seed, trial))?;
            let spec = ChainSpec::new(p, loss.clone())?;
            let scenario = Scenario::new(spec.clone(), pc)?;
            let run = RunSettings { initial_state: 0, ..run };
            let mut rows = Vec::new();
            for &kind in &cfg.policies {
                let policy = match scenario.policy(kind, cfg.delta) {
                    Ok(p) => p,
                    Err(e @ (Error::StationaryNotUnique { .. } | Error::NoConvergence { .. }))
                        if kind == PolicyKind::Stationary =>
                    {
                        warn!("trial {trial}: skipping {kind}: {e}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let s = run_episodes(&spec, &policy, pc.query_cost, &run, trial)?;
                rows.push(RandomStudyRow {
                    trial,
                    policy: kind,
                    gamma: s.mean,
                    stderr: s.stderr,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnRow {
    pub update: u64,
    pub frobenius_dist: f64,
    /// Step size of this update; for row 0 the step the first update will use.
    pub eta: f64,
}

/// PSGD on queries at the cycled gaps of `learn.gaps`. Learns the inline
/// chain if present, otherwise a random `learn.states`-state chain drawn
/// from the master seed. Returns the true matrix and the distance trace.
pub fn run_learning(cfg: &ExperimentConfig) -> Result<(ChainSpec, Vec<LearnRow>)> {
    let settings = &cfg.learn;
    let truth = match &cfg.transition {
        Some(_) => cfg.chain()?,
        None => {
            let p = random_chain(settings.states, &mut chain_rng(cfg.seed, 0))?;
            ChainSpec::new(p, presets::distance_loss(settings.states))?
        }
    };
    let mut est = EstimatorState::new(truth.num_states(), cfg.max_inter_query)?;
    let mut rng = crate::harness::simulate::episode_rng(cfg.seed, 0, 0);
    let mut state = cfg.initial_state.min(truth.num_states() - 1);
    let mut rows = vec![LearnRow {
        update: 0,
        frobenius_dist: est.distance_to(truth.transition()),
        eta: est.next_learning_rate(),
    }];
    for (gap, _) in settings.gaps.iter().cycle().zip(0..settings.updates) {
        let from = state;
        for _ in 0..*gap {
            state = sample_row(truth.transition().row(state), &mut rng);
        }
        let eta = est.update(&QueryObservation::new(from, *gap, state))?;
        if est.updates() % settings.record_every == 0 || est.updates() == settings.updates {
            rows.push(LearnRow {
                update: est.updates(),
                frobenius_dist: est.distance_to(truth.transition()),
                eta,
            });
        }
    }
    Ok((truth, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaitingRow {
    pub policy: String,
    pub horizon: Option<u64>,
    pub episodes: Option<u64>,
    pub gamma: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitingSettings {
    pub greedy_horizon: u64,
    pub greedy_episodes: u64,
    pub threshold_horizon: u64,
    pub threshold_episodes: u64,
    pub capped_max_inter_query: usize,
    pub seed: u64,
}

impl Default for WaitingSettings {
    fn default() -> Self {
        Self {
            greedy_horizon: 100,
            greedy_episodes: 1000,
            threshold_horizon: 1000,
            threshold_episodes: 100,
            capped_max_inter_query: 10,
            seed: 0,
        }
    }
}

/// Greedy versus waiting on the three-state chain with two absorbing
/// states and unit cost: greedy without a cap, thresholds `(1, H, H)` over
/// horizon `H`, and the planner's capped optimum.
pub fn run_waiting_comparison(settings: &WaitingSettings) -> Result<Vec<WaitingRow>> {
    let spec = presets::absorbing_three_state();
    let c = 1.0;
    let mut rows = Vec::new();

    let greedy_cap = settings.greedy_horizon.max(1) as usize;
    let scenario = Scenario::new(spec.clone(), PolicyConfig::new(c, greedy_cap)?)?;
    let run = RunSettings {
        horizon: settings.greedy_horizon,
        episodes: settings.greedy_episodes,
        seed: settings.seed,
        initial_state: 0,
    };
    let s = run_episodes(&spec, &scenario.policy(PolicyKind::Greedy, 1)?, c, &run, 0)?;
    rows.push(WaitingRow {
        policy: "greedy".into(),
        horizon: Some(run.horizon),
        episodes: Some(run.episodes),
        gamma: s.mean,
        stderr: s.stderr,
    });

    let h = settings.threshold_horizon.max(1) as usize;
    let scenario = Scenario::new(spec.clone(), PolicyConfig::new(c, h)?)?;
    let policy = scenario.threshold_policy(ThresholdVector::new(vec![1, h, h], h)?)?;
    let run = RunSettings {
        horizon: settings.threshold_horizon,
        episodes: settings.threshold_episodes,
        ..run
    };
    let s = run_episodes(&spec, &policy, c, &run, 1)?;
    rows.push(WaitingRow {
        policy: format!("threshold(1,{h},{h})"),
        horizon: Some(run.horizon),
        episodes: Some(run.episodes),
        gamma: s.mean,
        stderr: s.stderr,
    });

    let n_cap = settings.capped_max_inter_query;
    let plan = Scenario::new(spec, PolicyConfig::new(c, n_cap)?)?.plan()?;
    rows.push(WaitingRow {
        policy: format!("optimal{}", plan.thresholds),
        horizon: None,
        episodes: None,
        gamma: plan.gain,
        stderr: 0.0,
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRow {
    pub state: usize,
    pub threshold: usize,
    pub bias: f64,
    pub gain: f64,
}

pub fn plan_rows(plan: &PlanSolution) -> Vec<PlanRow> {
    plan.bias
        .iter()
        .enumerate()
        .map(|(state, &bias)| PlanRow {
            state,
            threshold: plan.thresholds.get(state),
            bias,
            gain: plan.gain,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cfg: ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            horizon: 2000,
            episodes: 3,
            ..cfg
        }
    }

    #[test]
    fn cost_sweep_shape() {
        let mut cfg = small(ExperimentConfig::with_chain(&presets::recurrent_five_state()));
        cfg.costs = Some(vec![0.1, 1.4]);
        let rows = run_cost_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * cfg.policies.len());
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("c,policy,gamma,stderr,queries_per_slot\n"));
        assert!(text.contains("\n0.1,optimal,"));
    }

    #[test]
    fn stationary_policy_skipped_on_reducible_chain() {
        let mut cfg = small(ExperimentConfig::with_chain(&presets::absorbing_three_state()));
        cfg.costs = Some(vec![1.0]);
        let rows = run_cost_sweep(&cfg).unwrap();
        assert!(rows.iter().all(|r| r.policy != PolicyKind::Stationary));
        assert_eq!(rows.len(), cfg.policies.len() - 1);
    }

    #[test]
    fn uniform_sweep_csv() {
        let cfg = small(ExperimentConfig::with_chain(&presets::recurrent_five_state()));
        let rows = run_uniform_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 10 + 3);
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("delta,variant,gamma,stderr\n"));
        assert!(text.contains("\n,optimal,"));
        let hold1 = rows
            .iter()
            .find(|r| r.delta == Some(1) && r.variant == PolicyKind::UniformHold)
            .unwrap();
        assert!((hold1.gamma - 1.4).abs() < 1e-12);
    }

    #[test]
    fn random_study_is_deterministic() {
        let mut cfg = small(ExperimentConfig::default());
        cfg.random.trials = 3;
        cfg.policies = vec![PolicyKind::Optimal, PolicyKind::Greedy];
        let render = |cfg: &ExperimentConfig| {
            let mut out = Vec::new();
            write_csv(&run_random_chain_study(cfg).unwrap(), &mut out).unwrap();
            out
        };
        let a = render(&cfg);
        assert_eq!(a, render(&cfg));
        assert!(String::from_utf8(a).unwrap().starts_with("trial,policy,gamma\n"));
    }

    #[test]
    fn learning_trace_schema() {
        let mut cfg = ExperimentConfig::default();
        cfg.max_inter_query = 5;
        cfg.learn.updates = 3000;
        let (_, rows) = run_learning(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].eta, 1.0 / 121.0);
        assert_eq!(rows[3].update, 3000);
        assert_eq!(rows[3].eta, 1.0 / (120.0 + 3000.0));
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("update,frobenius_dist,eta\n"));
    }

    #[test]
    fn waiting_comparison_rows() {
        let rows = run_waiting_comparison(&WaitingSettings {
            greedy_episodes: 200,
            threshold_episodes: 5,
            ..Default::default()
        })
        .unwrap();
        assert!((rows[0].gamma - 0.505).abs() < 0.02);
        assert_eq!(rows[1].gamma, 0.002);
        assert_eq!(rows[2].policy, "optimal(1,10,10)");
        assert!((rows[2].gamma - 0.1).abs() < 1e-12);
    }
}
