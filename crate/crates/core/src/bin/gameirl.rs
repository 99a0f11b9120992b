use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gameirl::matops::{gare_residual, solve_gare};
use gameirl::scenario::{
    collect_only, emit_plot_data, load_config, render_summary, run_scenario, Algorithm, ExpertSpec, ScenarioConfig,
};
use gameirl::Error;

/// Inverse RL for expert–learner zero-sum games.
#[derive(Parser)]
#[command(name = "gameirl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base seed for all random signals.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Only report failures.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the expert game and print K, L and P.
    Gare,
    /// Collect expert and learner batches only.
    Collect,
    /// Run the model-based iteration.
    Alg1,
    /// Run the data-driven iteration.
    Alg2,
    /// Run the configured algorithms and print the verification table.
    Verify,
    /// Full run plus long-format plot data.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli) -> Result<ScenarioConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let mut cfg = load(cli)?;
    match cli.command {
        Command::Gare => {
            let ExpertSpec::Weights(w) = &cfg.expert else {
                return Err(Error::Config("expert: `gare` needs expert.Q/R/gamma".into()));
            };
            let sol = solve_gare(&cfg.dynamics, w)?;
            let res = gare_residual(&cfg.dynamics, &w.q, &w.r, w.gamma, &sol.p);
            if !cli.quiet {
                println!("K = {:.6}", sol.k);
                println!("L = {:.6}", sol.l);
                println!("P = {:.6}", sol.p);
                println!("residual = {res:.3e}");
            }
            Ok(true)
        }
        Command::Collect => {
            let (expert, learner, rank) = collect_only(&cfg, &cfg.output_dir)?;
            if !cli.quiet {
                println!("expert windows = {}, learner windows = {}", expert.len(), learner.len());
                println!("rank expert = {} / {}", rank.expert_rank, rank.expert_required);
                println!("rank learner = {} / {}", rank.learner_rank, rank.learner_required);
                println!("written to {}", cfg.output_dir.display());
            }
            if !rank.passed() {
                eprintln!("rank condition failed");
            }
            Ok(rank.passed())
        }
        Command::Alg1 | Command::Alg2 | Command::Verify | Command::Report => {
            match cli.command {
                Command::Alg1 => cfg.run.algorithm = Algorithm::Alg1,
                Command::Alg2 => cfg.run.algorithm = Algorithm::Alg2,
                _ => {}
            }
            let artifacts = run_scenario(&cfg)?;
            if matches!(cli.command, Command::Report) {
                emit_plot_data(&artifacts)?;
            }
            if !cli.quiet {
                if matches!(cli.command, Command::Verify | Command::Report) {
                    print!("{}", artifacts.report.to_table());
                }
                print!("{}", render_summary(&artifacts));
            }
            for c in artifacts.report.failed() {
                eprintln!(
                    "check failed: {} = {:.4e} (tolerance {:.1e})",
                    c.name, c.value, c.tolerance
                );
            }
            Ok(artifacts.passed())
        }
    }
}
