use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shallow_diffusion_cli::config::ExperimentConfig;
use shallow_diffusion_cli::runs::{self, RunContext};
use shallow_diffusion_cli::{report, selftest, sweep, Failure};

#[derive(Parser)]
#[command(
    name = "sdn",
    version,
    about = "Synthetic diffusion experiments: structured targets, per-timestep \
             score training, exponential-integrator sampling"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for artifacts and records.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the Monte Carlo budget per risk estimate.
    #[arg(long = "n-mc", global = true, value_name = "N")]
    n_mc: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw each cell's clean dataset and write it out.
    Generate,
    /// Train per-timestep score models for every cell.
    Train,
    /// Run the reverse sampler from every cell's trained models.
    Sample,
    /// Score trained models against the exact oracle and append records.
    Evaluate,
    /// Probe-train and evaluate the whole (n, seed) grid in one pass.
    Sweep,
    /// Aggregate records into a summary table, rate fits, and a plot.
    Report {
        /// Record files to aggregate; defaults to <out>/records.jsonl.
        records: Vec<PathBuf>,
    },
    /// Run the built-in consistency checks.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, RunContext), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::usage("this command needs --config <FILE>"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    let env_seed = std::env::var("SEED_OVERRIDE").ok();
    cfg.apply_overrides(cli.seed, env_seed.as_deref(), cli.n_mc)?;
    let fingerprint = cfg.fingerprint();
    let ctx = RunContext::new(cli.out.clone(), fingerprint, cli.workers.max(1));
    Ok((cfg, ctx))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Generate => {
            let (cfg, ctx) = load_config(cli)?;
            runs::generate(&cfg, &ctx)?;
            println!("fingerprint {}", ctx.fingerprint);
            Ok(())
        }
        Command::Train => {
            let (cfg, ctx) = load_config(cli)?;
            runs::train(&cfg, &ctx)?;
            println!("fingerprint {}", ctx.fingerprint);
            Ok(())
        }
        Command::Sample => {
            let (cfg, ctx) = load_config(cli)?;
            runs::sample(&cfg, &ctx)?;
            println!("fingerprint {}", ctx.fingerprint);
            Ok(())
        }
        Command::Evaluate => {
            let (cfg, ctx) = load_config(cli)?;
            let records = runs::evaluate(&cfg, &ctx)?;
            println!(
                "appended {} record(s) to {} (fingerprint {})",
                records.len(),
                ctx.records_file().display(),
                ctx.fingerprint
            );
            Ok(())
        }
        Command::Sweep => {
            let (cfg, ctx) = load_config(cli)?;
            let records = sweep::sweep(&cfg, &ctx)?;
            println!(
                "swept {} cell(s); records in {} (fingerprint {})",
                records.len(),
                ctx.records_file().display(),
                ctx.fingerprint
            );
            Ok(())
        }
        Command::Report { records } => {
            let files = if records.is_empty() {
                vec![cli.out.join("records.jsonl")]
            } else {
                records.clone()
            };
            let series = report::report(&files, &cli.out)?;
            for s in &series {
                match &s.fit {
                    Some(fit) => println!(
                        "D = {}, d = {}: rate exponent {:.4} ± {:.4} over n = {:?}",
                        s.ambient_dim, s.latent_dim, fit.exponent, fit.se, fit.n_values
                    ),
                    None => println!(
                        "D = {}, d = {}: {} point(s), no rate fit",
                        s.ambient_dim,
                        s.latent_dim,
                        s.points.len()
                    ),
                }
            }
            println!(
                "wrote {}, {}, {}",
                cli.out.join("summary.csv").display(),
                cli.out.join("rate.csv").display(),
                cli.out.join("risk_vs_n.svg").display()
            );
            Ok(())
        }
        Command::Selftest => selftest::run(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
