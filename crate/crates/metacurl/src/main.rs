//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numeric
//! failures, 1 otherwise. Set `RUST_LOG=info` (or `debug`) for progress
//! logs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metacurl::harness::{
    oracle_comparators, run_experiment, seeded_inputs, sweep_experiment, trace_csv,
    ExperimentConfig, LearnerKind,
};
use metacurl::{CurlError, Result};

#[derive(Parser)]
#[command(
    name = "metacurl",
    version,
    about = "Benchmark runner for online CURL in non-stationary episodic MDPs",
    after_help = "Set RUST_LOG=info for progress logs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write CSV output under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the learner: metacurl, greedy-single or random-policy.
    #[arg(long)]
    learner: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed and emit per-episode CSV traces.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Also print each trace CSV to stdout.
        #[arg(long)]
        tee_csv: bool,
    },
    /// Re-run the seeds across sweep_episodes and fit the regret slope.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute only the oracle comparator losses for one seed.
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Parse a config file and report whether it is usable.
    ValidateConfig {
        /// Experiment description (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_with_overrides(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.run.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.run.out_dir = Some(out.clone());
    }
    if let Some(name) = &common.learner {
        let kind = LearnerKind::parse(name)?;
        if kind != config.learner.kind {
            config.learner.kind = kind;
            match kind {
                LearnerKind::Metacurl => config.learner.lambda = None,
                LearnerKind::GreedySingle => {
                    config.learner.grid = None;
                    config.learner.kernel_mode = None;
                }
                LearnerKind::RandomPolicy => {
                    config.learner.lambda = None;
                    config.learner.grid = None;
                    config.learner.kernel_mode = None;
                }
            }
        }
        config.validate()?;
    }
    Ok(config)
}

fn cmd_run(common: &CommonArgs, tee_csv: bool) -> Result<()> {
    let config = load_with_overrides(common)?;
    let report = run_experiment(&config)?;
    for trace in &report.traces {
        let s = &trace.summary;
        println!(
            "seed {}: episodes {}, total regret {:.6}, kernel drift {:.4} ({} phases), \
             comparator drift {:.4}",
            s.seed,
            s.episodes,
            s.total_regret,
            s.kernel_drift,
            s.kernel_phases,
            s.comparator_drift
        );
    }
    if tee_csv {
        for trace in &report.traces {
            print!("{}", trace_csv(trace));
        }
    }
    if let Some(dir) = &config.run.out_dir {
        println!("traces written under {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(common: &CommonArgs) -> Result<()> {
    let config = load_with_overrides(common)?;
    let report = sweep_experiment(&config)?;
    for p in &report.points {
        println!("episodes {}: median regret {:.6}", p.episodes, p.median_regret);
    }
    println!("fitted log-log slope: {:.4}", report.slope);
    Ok(())
}

fn cmd_oracle(common: &CommonArgs) -> Result<()> {
    let config = load_with_overrides(common)?;
    let seed = *config
        .run
        .seeds
        .first()
        .ok_or_else(|| CurlError::Config("need at least one seed".into()))?;
    let inputs = seeded_inputs(&config, seed, config.run.episodes)?;
    let result = oracle_comparators(
        &inputs.shape,
        &inputs.env,
        &inputs.objectives,
        config.comparator.mode,
    )?;
    let total: f64 = result.losses.iter().sum();
    println!(
        "seed {seed}: comparator total loss {:.6}, policy drift {:.4} ({} segments)",
        total, result.variation.total, result.variation.hard
    );
    let mut csv = String::from("t,comparator_loss\n");
    for (i, loss) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    match &config.run.out_dir {
        Some(dir) => {
            let path = dir.join(format!("comparator_seed_{seed}.csv"));
            std::fs::create_dir_all(dir).map_err(|e| CurlError::io(dir, e))?;
            std::fs::write(&path, csv).map_err(|e| CurlError::io(&path, e))?;
            println!("comparator losses written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_validate(path: &PathBuf) -> Result<()> {
    ExperimentConfig::load(path)?;
    println!("ok: {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run { common, tee_csv } => cmd_run(common, *tee_csv),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Oracle { common } => cmd_oracle(common),
        Command::ValidateConfig { config } => cmd_validate(config),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                CurlError::Config(_) => 2,
                CurlError::Numeric(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
