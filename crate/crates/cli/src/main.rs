//! `repromia`: run attack, theory and ablation experiments from a config file.

use clap::{Parser, Subcommand};
use repromia::eval::AttackReport;
use repromia::harness::{rederive_report, run_ablation, run_attack_pipeline, run_theory_suite, ExperimentConfig};
use repromia::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "repromia", version, about = "Membership inference by learned input reprogramming")]
struct Cli {
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-sample scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train models and a pattern, score the evaluation split, write reports.
    Attack { config: PathBuf },
    /// Run the attack pipeline plus the Hessian, gradient, loss-gap and MI probes.
    Theory { config: PathBuf },
    /// Repeat the attack pipeline once per value of one config key.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Recompute metrics of a finished run from its stored scores.
    Report { run_dir: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> repromia::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn print_reports(reports: &[AttackReport]) {
    println!("{:<16} {:<24} {:>8} {:>8} {:>8}", "attack", "defense", "auc", "bal_acc", "adv");
    for r in reports {
        println!(
            "{:<16} {:<24} {:>8.4} {:>8.4} {:>8.4}",
            r.attack_name, r.defense_name, r.auc, r.balanced_acc, r.advantage
        );
    }
}

fn run(cli: &Cli) -> repromia::Result<()> {
    match &cli.command {
        Command::Attack { config } => {
            let out = run_attack_pipeline(&load(cli, config)?)?;
            print_reports(&out.reports);
            println!("target rho {:.3}; run directory {}", out.target.rho, out.manifest.run_dir);
        }
        Command::Theory { config } => {
            let out = run_theory_suite(&load(cli, config)?)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            println!("run directory {}", out.manifest.run_dir);
        }
        Command::Ablate { config, param, values } => {
            let (m, rows) = run_ablation(&load(cli, config)?, param, values)?;
            for r in rows {
                println!("{param}={:<10} {:<16} {:<24} auc {:.4}", r.value, r.attack, r.defense, r.auc);
            }
            println!("run directory {}", m.run_dir);
        }
        Command::Report { run_dir } => print_reports(&rederive_report(run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
