//! `spdectl`: generate data, train surrogates and policies, run controllers
//! and benchmarks from one JSON run configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spdectl_core::bench::{
    generate, run_benchmark, run_control, run_noise_ablation, train_policies, train_surrogates, AblationPart,
    RunConfig, RunDir,
};
use spdectl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "spdectl", version, about = "Stochastic PDE surrogates and control")]
struct Cli {
    /// JSON run configuration; built-in reaction-diffusion defaults when absent.
    #[arg(long, global = true, env = "SPDECTL_CONFIG")]
    config: Option<PathBuf>,
    /// Run directory for data, checkpoints and results.
    #[arg(long, global = true, env = "SPDECTL_OUT", default_value = "run")]
    out: PathBuf,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true, env = "SPDECTL_SEED")]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true, env = "SPDECTL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the training and test sets.
    Generate,
    /// Train every configured surrogate and report test errors.
    TrainSurrogate,
    /// Train a policy through each surrogate.
    TrainPolicy,
    /// Run the trained policies in closed loop and write event logs.
    Control,
    /// Zero, closed-loop and open-loop control on the evaluation tasks.
    Bench,
    /// Noise-scale ablations.
    Ablate {
        #[arg(long, value_enum, default_value = "both")]
        part: Part,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Part {
    Control,
    Model,
    Both,
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        Failure::Config(format!("{}: at `{at}`: {inner}", path.display()))
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let dir = RunDir::new(&cli.out);
    match cli.command {
        Command::Generate => generate(&cfg, &dir).map(drop),
        Command::TrainSurrogate => train_surrogates(&cfg, &dir).map(drop),
        Command::TrainPolicy => train_policies(&cfg, &dir).map(drop),
        Command::Control => run_control(&cfg, &dir).map(drop),
        Command::Bench => run_benchmark(&cfg, &dir).map(|out| {
            for s in &out.skipped {
                eprintln!("warning: skipped rows of missing {s}");
            }
            print!("{}", out.table.text());
        }),
        Command::Ablate { part } => {
            let part = match part {
                Part::Control => AblationPart::Control,
                Part::Model => AblationPart::Model,
                Part::Both => AblationPart::Both,
            };
            run_noise_ablation(&cfg, &dir, part).map(|out| {
                if let Some(c) = &out.control {
                    print!("{}", c.table.text());
                }
                if let Some(m) = &out.model {
                    print!("{}", m.slopes_csv());
                }
            })
        }
    }
    .map_err(|e: Error| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
