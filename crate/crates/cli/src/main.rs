use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tsnode::tsnode::{Profile, Variant};
use tsnode_cli::manifest::{ExperimentManifest, Overrides};
use tsnode_cli::runs::TrainingFailed;
use tsnode_cli::{data, plot, runs, verify, write_file};

/// Teacher-student neural ODE experiments.
#[derive(Parser)]
#[command(name = "tsnode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the benchmark system and write its CSV trajectories.
    GenerateData(Common),
    /// Train every variant and seed of the manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ignore existing checkpoints.
        #[arg(long)]
        fresh: bool,
    },
    /// One TS-NODE run per sigma of the manifest's sweep list.
    SweepSigma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fresh: bool,
    },
    /// Re-score trained models on the test data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directories to score; all runs when omitted.
        #[arg(long)]
        run: Vec<PathBuf>,
    },
    /// Phase portraits, vector fields and error curves as SVG plus CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Vec<PathBuf>,
    },
    /// Gradient, integrator and metric oracles.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write verify.json.
        #[arg(long, default_value = "tsnode-out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentManifest> {
        let ov = Overrides { variant: self.variant, seed: self.seed, profile: self.profile, out: self.out.clone() };
        ExperimentManifest::load(&self.manifest, &ov)
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant `{s}`"))
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    Profile::parse(s).ok_or_else(|| format!("unknown profile `{s}` (desk or paper)"))
}

enum Outcome {
    Done,
    VerificationFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenerateData(c) => {
            let dir = data::generate_data(&c.load()?)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { common, fresh } => {
            let m = common.load()?;
            let records = runs::train(&m, fresh)?;
            for r in &records {
                println!(
                    "{}: local {:.4e}, rollouts 100% {:.4e} ({} skipped)",
                    r.name, r.summary.local_error, r.summary.rollouts_error[4], r.skipped
                );
            }
        }
        Command::SweepSigma { common, fresh } => match runs::sweep_sigma(&common.load()?, fresh)? {
            Some(path) => println!("sweep table written to {}", path.display()),
            None => println!("sigma_sweep is empty; nothing to do"),
        },
        Command::Evaluate { common, run } => {
            for e in runs::evaluate_runs(&common.load()?, &run)? {
                println!("{}: local {:.4e}, rollouts 100% {:.4e}", e.run, e.metrics.local_error, e.metrics.rollouts_error[4]);
            }
        }
        Command::Plot { common, run } => {
            let dir = plot::plot(&common.load()?, &run)?;
            println!("figures written to {}", dir.display());
        }
        Command::Verify { seed, out } => {
            let report = verify::run_all(seed);
            for c in &report.checks {
                println!(
                    "{} {}: measured {:e}, tolerance {:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance
                );
            }
            let path = out.join("verify.json");
            write_file(&path, &serde_json::to_string_pretty(&report).context("serializing report")?)?;
            if !report.passed {
                return Ok(Outcome::VerificationFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TSNODE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("TSNODE_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<TrainingFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
