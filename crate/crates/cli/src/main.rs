use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tta_cli::config::{parse_override, RunConfig};
use tta_cli::harness::{self, Outcome, SweepParam};
use tta_cli::CliError;

/// Online test-time adaptation experiments on synthetic domain-shift benchmarks.
#[derive(Parser)]
#[command(name = "tta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=1e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and save the source model for every seed.
    TrainSource(Common),
    /// Adapt a saved source checkpoint on every configured method and seed.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train source models, then adapt with every configured method and seed.
    Run(Common),
    /// One run per (value, seed) of the full method.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// k, m or lambda.
        #[arg(long)]
        param: String,
        /// Comma-separated values; `NA` disables the entropy filter for m.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// The four-rung component ladder SD, SD+EF, SD+EF+CF, SD+EF+CF+MSLC.
    Ablate(Common),
}

fn load(common: &Common, extra: Vec<(String, toml::Value)>) -> Result<RunConfig, CliError> {
    let mut overrides = common.overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(seed as i64)])));
    }
    if let Some(dir) = &common.output_dir {
        overrides.push(("output_dir".into(), toml::Value::String(dir.display().to_string())));
    }
    overrides.extend(extra);
    match &common.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_toml("", &overrides),
    }
}

fn print_summary(outcome: &Outcome) {
    for (label, g) in &outcome.summary {
        let flag = if g.flagged.is_empty() { "" } else { "  (non-finite batches)" };
        println!("{label:16} mean {:.4}  std {:.4}{flag}", g.mean, g.std);
    }
    println!("wrote {}", outcome.output_dir.display());
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainSource(common) => {
            let cfg = load(&common, vec![])?;
            for (seed, acc) in harness::train_sources(&cfg)? {
                println!("seed {seed}: source validation accuracy {acc:.4}");
            }
            println!("wrote {}", cfg.output_dir.join("checkpoints").display());
        }
        Command::Adapt { common, checkpoint } => {
            let extra = checkpoint
                .map(|p| vec![("checkpoint".to_string(), toml::Value::String(p.display().to_string()))])
                .unwrap_or_default();
            let cfg = load(&common, extra)?;
            print_summary(&harness::adapt(&cfg)?);
        }
        Command::Run(common) => {
            let cfg = load(&common, vec![])?;
            print_summary(&harness::run(&cfg)?);
        }
        Command::Sweep { common, param, values } => {
            let cfg = load(&common, vec![])?;
            let param: SweepParam = param.parse()?;
            let (outcome, rows) = harness::sweep(&cfg, param, &values)?;
            println!("value,mean_accuracy,std");
            for r in rows {
                println!("{},{:.4},{:.4}", r.value, r.mean_accuracy, r.std);
            }
            println!("wrote {}", outcome.output_dir.display());
        }
        Command::Ablate(common) => {
            let cfg = load(&common, vec![])?;
            print_summary(&harness::ablate(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
