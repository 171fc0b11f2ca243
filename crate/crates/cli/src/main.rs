use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use monitor_core::harness::{
    episode_rng, plan_rows, run_cost_sweep, run_episodes, run_learning, run_random_chain_study, run_waiting_comparison,
    run_uniform_sweep, simulate, write_csv, ExperimentConfig, PolicyKind, Scenario, WaitingSettings,
};
use monitor_core::Error;

/// Plan, simulate and sweep query/predict policies for monitoring a
/// Markov source.
#[derive(Debug, Parser)]
#[command(name = "qmon", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of slots per episode
    #[arg(long, global = true)]
    horizon: Option<u64>,
    /// Override the number of episodes
    #[arg(long, global = true)]
    episodes: Option<u64>,
    /// Write the CSV result here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal thresholds by policy iteration
    Plan {
        /// Query cost; defaults to the config's `query_cost`
        #[arg(long)]
        cost: Option<f64>,
    },
    /// Simulate one policy
    Simulate {
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        cost: Option<f64>,
        /// Sampling interval for the uniform policies
        #[arg(long)]
        delta: Option<usize>,
        /// Write the slot-by-slot trace of episode 0 to this CSV file
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Average cost of every configured policy across the cost grid
    SweepCost,
    /// Uniform sampling across sampling intervals
    SweepUniform,
    /// Policies on randomly drawn chains
    RandomStudy,
    /// PSGD estimation error over updates
    Learn,
    /// Greedy versus waiting on the chain with two absorbing states
    Thm1 {
        /// Threshold horizon H for the (1,H,H) policy
        #[arg(long, default_value_t = 1000)]
        wait_horizon: u64,
    },
}

/// Where CSV output goes.
enum Output {
    Stdout,
    File(PathBuf),
}

impl Output {
    fn writer(&self) -> Result<Box<dyn Write>, Error> {
        Ok(match self {
            Output::Stdout => Box::new(io::stdout().lock()),
            Output::File(p) => Box::new(io::BufWriter::new(File::create(p)?)),
        })
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(h) = common.horizon {
        cfg.horizon = h;
    }
    if let Some(e) = common.episodes {
        cfg.episodes = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_config(common: &Common) -> Result<(), Error> {
    if common.config.is_none() {
        return Err(Error::Config("this command needs --config".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let out = match &cli.common.out {
        Some(p) => Output::File(p.clone()),
        None => Output::Stdout,
    };
    match cli.command {
        Command::Plan { cost } => {
            require_config(&cli.common)?;
            let cfg = load_config(&cli.common)?;
            let c = cost.unwrap_or(cfg.query_cost);
            let plan = Scenario::new(cfg.chain()?, cfg.policy_config(c)?)?.plan()?;
            if let Output::File(_) = out {
                write_csv(&plan_rows(&plan), out.writer()?)?;
            }
            let bias: Vec<String> = plan.bias.iter().map(|b| format!("{b:.6}")).collect();
            println!("thresholds {}", plan.thresholds);
            println!("gain {:.10}", plan.gain);
            println!("bias [{}]", bias.join(", "));
            println!("iterations {}", plan.iterations);
        }
        Command::Simulate {
            policy: kind,
            cost,
            delta,
            trace,
        } => {
            require_config(&cli.common)?;
            let cfg = load_config(&cli.common)?;
            let c = cost.unwrap_or(cfg.query_cost);
            let spec = cfg.chain()?;
            let scenario = Scenario::new(spec.clone(), cfg.policy_config(c)?)?;
            let policy = scenario.policy(kind, delta.unwrap_or(cfg.delta))?;
            let run = cfg.run_settings();
            let summary = run_episodes(&spec, &policy, c, &run, 0)?;
            println!(
                "{kind}: gamma {:.6} stderr {:.6} queries/slot {:.6}",
                summary.mean, summary.stderr, summary.queries_per_slot
            );
            if let Some(path) = trace {
                let mut p = policy.clone();
                let mut rng = episode_rng(run.seed, 0, 0);
                let outcome = simulate(&spec, &mut p, c, run.horizon, run.initial_state, &mut rng, true)?;
                write_csv(&outcome.trace.unwrap_or_default(), File::create(&path)?)?;
                info!("trace written to {}", path.display());
            }
        }
        Command::SweepCost => {
            require_config(&cli.common)?;
            let cfg = load_config(&cli.common)?;
            write_csv(&run_cost_sweep(&cfg)?, out.writer()?)?;
        }
        Command::SweepUniform => {
            require_config(&cli.common)?;
            let cfg = load_config(&cli.common)?;
            write_csv(&run_uniform_sweep(&cfg)?, out.writer()?)?;
        }
        Command::RandomStudy => {
            let cfg = load_config(&cli.common)?;
            write_csv(&run_random_chain_study(&cfg)?, out.writer()?)?;
        }
        Command::Learn => {
            let cfg = load_config(&cli.common)?;
            let (_, rows) = run_learning(&cfg)?;
            write_csv(&rows, out.writer()?)?;
        }
        Command::Thm1 { wait_horizon } => {
            let mut settings = WaitingSettings {
                threshold_horizon: wait_horizon,
                ..Default::default()
            };
            if let Some(s) = cli.common.seed {
                settings.seed = s;
            }
            if let Some(h) = cli.common.horizon {
                settings.greedy_horizon = h;
            }
            if let Some(e) = cli.common.episodes {
                settings.greedy_episodes = e;
            }
            write_csv(&run_waiting_comparison(&settings)?, out.writer()?)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(p) = cli.common.config.as_deref().filter(|p| !Path::new(p).exists()) {
        eprintln!("error: config file {} not found", p.display());
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
