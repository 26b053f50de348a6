//! Experiment runner: regress | reweight | bench | gradcheck.
//!
//! Exit codes: 0 success, 1 experiment failure, 2 config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metagrad::cli;
use metagrad::Error;

#[derive(Parser)]
#[command(name = "metagrad", version, about = "Bilevel meta-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config with [regress]/[reweight]/[bench]/[gradcheck] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path (derived outputs use suffixes next to it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed (and METAGRAD_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to a single method.
    #[arg(long)]
    method: Option<String>,
    /// Worker count override (bench only).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Biased regression: meta-gradient quality against closed forms.
    Regress(Common),
    /// Noisy-label data reweighting with a learned weight net.
    Reweight(Common),
    /// Throughput / memory / synchronization matrix.
    Bench(Common),
    /// Finite-difference verification suites.
    Gradcheck(Common),
}

fn write_out(path: &Option<PathBuf>, contents: &str, default_name: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, contents)?,
        None => {
            let p = PathBuf::from(default_name);
            std::fs::write(&p, contents)?;
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn sidecar(path: &Option<PathBuf>, default_name: &str, suffix: &str) -> PathBuf {
    let base = path
        .clone()
        .unwrap_or_else(|| PathBuf::from(default_name));
    let mut name = base.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Regress(common) => {
            let mut cfg = cli::load_config(common.config.as_deref())?.regress;
            cfg.seed = cli::resolve_seed(cfg.seed, common.seed)?;
            if let Some(m) = &common.method {
                cfg.methods = vec![m.clone()];
            }
            let outcome = cli::run_regress(&cfg)?;
            write_out(&common.out, &cli::regress_csv(&outcome.rows), "regress.csv")?;
            eprintln!(
                "initial |lambda - lambda*| = {:.6}; final per method: {:?}",
                outcome.initial_lambda_dist, outcome.final_lambda_dist
            );
            Ok(())
        }
        Command::Reweight(common) => {
            let mut cfg = cli::load_config(common.config.as_deref())?.reweight;
            cfg.seed = cli::resolve_seed(cfg.seed, common.seed)?;
            if let Some(m) = &common.method {
                cfg.methods = vec![m.clone()];
            }
            let outcome = cli::run_reweight(&cfg)?;
            write_out(&common.out, &cli::reweight_csv(&outcome.rows), "reweight.csv")?;
            let summary_path = sidecar(&common.out, "reweight.csv", ".summary.json");
            std::fs::write(
                &summary_path,
                serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"),
            )?;
            eprintln!("mean final accuracy: {:?}", outcome.summary.mean_accuracy);
            Ok(())
        }
        Command::Bench(common) => {
            let mut cfg = cli::load_config(common.config.as_deref())?.bench;
            cfg.seed = cli::resolve_seed(cfg.seed, common.seed)?;
            if let Some(m) = &common.method {
                cfg.methods = vec![m.clone()];
            }
            if let Some(k) = common.workers {
                cfg.workers = vec![k];
            }
            let outcome = cli::run_bench(&cfg)?;
            write_out(&common.out, &cli::bench_csv(&outcome.rows), "bench.csv")?;
            if !outcome.comm_log.is_empty() {
                let log_path = sidecar(&common.out, "bench.csv", ".comm.jsonl");
                let lines: String = outcome
                    .comm_log
                    .iter()
                    .map(|r| r.to_json_line() + "\n")
                    .collect();
                std::fs::write(&log_path, lines)?;
            }
            Ok(())
        }
        Command::Gradcheck(common) => {
            let mut cfg = cli::load_config(common.config.as_deref())?.gradcheck;
            cfg.seed = cli::resolve_seed(cfg.seed, common.seed)?;
            let outcome = cli::run_gradcheck(&cfg)?;
            let report = outcome.render();
            print!("{report}");
            if let Some(out) = &common.out {
                std::fs::write(out, &report)?;
            }
            if outcome.all_passed() {
                Ok(())
            } else {
                Err(Error::Unsupported("gradcheck failures".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
