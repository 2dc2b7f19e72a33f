//! `honeymark` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use honeymark::pipeline::{
    run_experiment, run_stage, verify_checkpoint, ExperimentConfig, Stage,
};

#[derive(Parser)]
#[command(
    name = "honeymark",
    about = "Dataset ownership verification through hard-sample honey images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON); paths inside resolve relative to it.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline end to end.
    Run(Common),
    /// Materialize the dataset and the public/private/fold split.
    Split(Common),
    /// Train the two hardness fold proxies.
    TrainProxies(Common),
    /// Score private samples and select the hard set.
    ScoreHardness(Common),
    /// Run the honey-image optimization.
    GenerateHoney(Common),
    /// Train compliant/infringing model pairs.
    TrainPair {
        #[command(flatten)]
        common: Common,
        /// Train only this pair index (default: all pairs).
        #[arg(long)]
        pair: Option<usize>,
    },
    /// Query suspicious models and persist per-sample reports.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Verify one external checkpoint instead of the run's pairs.
        #[arg(long)]
        suspicious: Option<PathBuf>,
        /// Tag for the ad-hoc report file.
        #[arg(long, default_value = "adhoc")]
        tag: String,
    },
    /// Recompute all metrics from persisted artifacts (no model access).
    Report(Common),
    /// Write the default desk experiment config to a file.
    InitConfig {
        /// Destination path for the config JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> honeymark::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() {
    let threads = std::env::var("HONEYMARK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0);
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> honeymark::Result<()> {
    match cli.command {
        Command::Run(common) => run_experiment(&load_config(&common)?),
        Command::Split(common) => run_stage(&load_config(&common)?, Stage::Split, None),
        Command::TrainProxies(common) => {
            run_stage(&load_config(&common)?, Stage::TrainProxies, None)
        }
        Command::ScoreHardness(common) => {
            run_stage(&load_config(&common)?, Stage::ScoreHardness, None)
        }
        Command::GenerateHoney(common) => {
            run_stage(&load_config(&common)?, Stage::GenerateHoney, None)
        }
        Command::TrainPair { common, pair } => {
            run_stage(&load_config(&common)?, Stage::TrainPairs, pair)
        }
        Command::Verify {
            common,
            suspicious,
            tag,
        } => {
            let cfg = load_config(&common)?;
            match suspicious {
                Some(checkpoint) => {
                    let report = verify_checkpoint(&cfg, &checkpoint, &tag)?;
                    println!(
                        "verified {} samples against {}: positive rate {:.4} at threshold {}",
                        report.query_count,
                        tag,
                        report.positive_rate(),
                        report.threshold
                    );
                    Ok(())
                }
                None => run_stage(&cfg, Stage::Verify, None),
            }
        }
        Command::Report(common) => run_stage(&load_config(&common)?, Stage::Report, None),
        Command::InitConfig { out } => {
            let cfg = ExperimentConfig::desk_default();
            cfg.save(&out)?;
            println!("wrote desk config to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(u8::try_from(err.exit_code()).unwrap_or(1))
        }
    }
}
