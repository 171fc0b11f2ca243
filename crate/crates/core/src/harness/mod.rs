//! Trajectory simulation, experiment sweeps, configuration and CSV output.

pub mod config;
pub mod experiments;
pub mod simulate;

pub use config::ExperimentConfig;
pub use experiments::{
    chain_rng, plan_rows, run_cost_sweep, run_learning, run_random_chain_study, run_waiting_comparison, run_uniform_sweep, write_csv,
    CostSweepRow, LearnRow, PlanRow, RandomStudyRow, WaitingRow, WaitingSettings, UniformSweepRow,
};
pub use simulate::{
    episode_rng, run_episodes, simulate, CostLedger, EpisodeSummary, Policy, PolicyKind, RunSettings, Scenario,
    SimulationOutcome, SlotRecord,
};
