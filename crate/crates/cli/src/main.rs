use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rticert_cli::commands::{self, LoadedBundle};
use rticert_cli::config::ScenarioConfig;
use rticert_cli::CliError;

#[derive(Parser)]
#[command(name = "rticert", version, about = "Simulate and certify real-time-iteration NMPC loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling time in seconds (repeatable for certify).
    #[arg(long = "T", value_name = "SECONDS")]
    t: Vec<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop runs from every initial state, written as CSV plus a gnuplot script.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Constants bundle used for V_so and the trace audit.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the constants bundle from exact-policy data.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stability certificates of a bundle at one or more sampling times.
    Certify {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate, certify and simulate the pinned Chen example.
    ReproduceChen {
        /// Use this scenario instead of the pinned one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn with_sampling_time(mut cfg: ScenarioConfig, t: &[f64]) -> Result<ScenarioConfig, CliError> {
    match t {
        [] => {}
        [t] => {
            cfg.sampling_time = *t;
            cfg.validate()?;
        }
        _ => return Err(CliError::Config("T: this command takes a single sampling time".into())),
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    match cli.command {
        Command::Simulate { config, bundle, common } => {
            let cfg = with_sampling_time(ScenarioConfig::load(&config)?, &common.t)?;
            let bundle = match bundle {
                Some(p) => match commands::load_bundle_file(&p)? {
                    LoadedBundle::Full(b, _) => Some(b),
                    LoadedBundle::Partial(_) => {
                        return Err(CliError::Config("bundle: simulate needs a full estimated bundle".into()))
                    }
                },
                None => None,
            };
            let seed = common.seed.or(cfg.seed).unwrap_or(0);
            let outcome = commands::simulate(&cfg, bundle.as_deref(), seed, &common.out)?;
            print!("{}", outcome.summary);
            println!("wrote {} files to {}", outcome.files.len(), common.out.display());
        }
        Command::Estimate { config, common } => {
            let cfg = with_sampling_time(ScenarioConfig::load(&config)?, &common.t)?;
            let outcome = commands::estimate(&cfg, common.seed, &common.out)?;
            print!("{}", outcome.text);
            println!("wrote {}", outcome.path.display());
        }
        Command::Certify { bundle, common } => {
            let loaded = commands::load_bundle_file(&bundle)?;
            let outcome = commands::certify(&loaded, &common.t)?;
            print!("{}", outcome.text);
            let path = commands::write_certificate(&outcome, &common.out)?;
            println!("wrote {}", path.display());
        }
        Command::ReproduceChen { config, common } => {
            let cfg = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::chen(),
            };
            let cfg = with_sampling_time(cfg, &common.t)?;
            let outcome = commands::reproduce_chen(&cfg, common.seed, &common.out)?;
            print!("{}", outcome.summary);
            println!("artifacts in {}", common.out.display());
        }
    }
    eprintln!("done in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rticert: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
