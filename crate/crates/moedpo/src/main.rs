use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moedpo::commands;
use moedpo::config::{Config, Overrides};
use moedpo::io;
use moedpo::verify::{Fault, VerifyReport};
use moedpo::CliError;
use moedpo_core::em::{Algorithm, Mode};

#[derive(Parser)]
#[command(name = "moedpo", version, about = "Mixture-of-experts preference alignment on finite spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and its ground truth.
    Generate,
    /// Train on a generated dataset.
    Train {
        /// Directory holding dataset.jsonl (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in --out if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint against source labels and the ground truth.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the property battery.
    Verify,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long = "fault-inject", global = true, value_name = "NAME")]
    fault_inject: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Em,
    EmRegularized,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mix,
    Moe,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            algorithm: self.algorithm.map(|a| match a {
                AlgorithmArg::Em => Algorithm::Em,
                AlgorithmArg::EmRegularized => Algorithm::EmRegularized,
                AlgorithmArg::Mc => Algorithm::Mc,
            }),
            mode: self.mode.map(|m| match m {
                ModeArg::Mix => Mode::Mix,
                ModeArg::Moe => Mode::Moe,
            }),
            epochs: self.epochs,
            beta: self.beta,
            tau: self.tau,
        }
    }

    fn config(&self) -> Result<Config, CliError> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_verify(report: &VerifyReport) {
    for c in &report.checks {
        println!(
            "{} {:<12} {:<36} deviation {:.3e} tolerance {:.1e} ({:.2}s) {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.module,
            c.id,
            c.max_deviation,
            c.tolerance,
            c.seconds,
            c.detail
        );
    }
    println!("coverage manifest:");
    for e in &report.coverage {
        println!("  {:<12} {:<36} {}", e.module, e.property, e.checks.join(", "));
    }
    let failed = report.failures().len();
    println!(
        "{} of {} checks passed (seed {}, fault {})",
        report.checks.len() - failed,
        report.checks.len(),
        report.seed,
        report.fault
    );
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let c = &cli.common;
    if c.fault_inject.is_some() && !matches!(cli.command, Command::Verify) {
        return Err(CliError::Config("--fault-inject only applies to verify".into()));
    }
    match &cli.command {
        Command::Generate => {
            let cfg = c.config()?;
            let g = commands::generate(&cfg, &c.out)?;
            println!(
                "wrote {} triplets over {} prompts to {}",
                g.triplets.len(),
                cfg.data.num_prompts - cfg.data.holdout_prompts,
                c.out.display()
            );
        }
        Command::Train { data, resume } => {
            let cfg = c.config()?;
            let data_dir = data.as_deref().unwrap_or(&c.out);
            let ck = commands::train(&cfg, data_dir, &c.out, *resume)?;
            let last = ck.state.metrics.last();
            println!(
                "epoch {} elbo {:.6} mbt_loss {:.6}; checkpoint {}",
                ck.state.epoch,
                last.map_or(f64::NAN, |m| m.elbo),
                last.map_or(f64::NAN, |m| m.mbt_loss),
                c.out.join(io::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { data, checkpoint } => {
            let ck = checkpoint.clone().unwrap_or_else(|| c.out.join(io::CHECKPOINT_FILE));
            let data_dir: &Path = data.as_deref().unwrap_or(&c.out);
            let report = commands::eval(&ck, data_dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify => {
            let fault = match &c.fault_inject {
                Some(name) => name.parse::<Fault>().map_err(CliError::Config)?,
                None => Fault::None,
            };
            let seed = match &c.config {
                Some(_) => c.config()?.seed,
                None => c.seed.unwrap_or(0),
            };
            let report = commands::verify(seed, fault, Some(&c.out))?;
            print_verify(&report);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
