use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppfl_core::config::{ExperimentConfig, Scenario};
use ppfl_core::experiment::{cmd_attack, cmd_preprocess, cmd_run, cmd_sweep_with, ExperimentError};

#[derive(Debug, Parser)]
#[command(name = "ppfl", version, about = "Oblivious differentially private federated logistic regression")]
struct Cli {
    /// Experiment configuration (TOML). Built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true, env = "PPFL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert the Adult census CSV into a content-addressed snapshot.
    Preprocess {
        input: PathBuf,
        /// Directory for the snapshot; defaults to the input's directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train once and write metrics.csv, timing.csv and weights.csv.
    Run,
    /// Run the n-1 collusion attack against one client.
    Attack {
        /// Comma-separated scenario names, e.g. NAIVE,DIFF.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Run the (n, epsilon) grid, resuming finished cells.
    Sweep,
    /// Print the effective configuration with every default filled in.
    ShowConfig,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Preprocess { input, out } => {
            let s = cmd_preprocess(input, out.as_deref())?;
            println!("{s}");
            println!("snapshot {} (content {})", s.snapshot.display(), s.content_hash);
        }
        Command::Run => {
            let cfg = load_config(&cli)?;
            let s = cmd_run(&cfg)?;
            if let Some(last) = s.result.metrics.last() {
                println!("round {}: mcc {:.4}, mse {:.3e}", last.round, last.mcc, last.mse);
            }
            for path in [&s.metrics_path, &s.timing_path, &s.weights_path] {
                println!("wrote {}", path.display());
            }
        }
        Command::Attack { scenarios, iterations } => {
            let mut cfg = load_config(&cli)?;
            if !scenarios.is_empty() {
                cfg.attack.scenarios = scenarios
                    .iter()
                    .map(|s| Scenario::parse(s).ok_or_else(|| CliError::Config(format!("unknown scenario {s}"))))
                    .collect::<Result<_, _>>()?;
            }
            if let Some(n) = iterations {
                cfg.attack.iterations = *n;
            }
            let s = cmd_attack(&cfg)?;
            for r in &s.run.results {
                let flag = if r.r_squared.defined { "" } else { " (undefined)" };
                println!("{:<14} r2 {:.4}{flag}", r.scenario.name(), r.r_squared.value);
            }
            for path in [&s.attack_path, &s.summary_path, &s.histogram_path] {
                println!("wrote {}", path.display());
            }
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            let s = cmd_sweep_with(&cfg, |cell| eprintln!("finished {}", cell.dir_name()))?;
            println!(
                "{} cells run, {} resumed, {} failed",
                s.completed.len(),
                s.skipped.len(),
                s.failed.len()
            );
            for (cell, e) in &s.failed {
                eprintln!("{}: {e}", cell.dir_name());
            }
            println!("wrote {}", s.merged_path.display());
            if !s.failed.is_empty() {
                return Err(CliError::Runtime(format!("{} sweep cells failed", s.failed.len())));
            }
        }
        Command::ShowConfig => {
            let cfg = load_config(&cli)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
