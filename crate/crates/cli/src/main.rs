use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slang_core::experiment::{dump_covariance, load_state, run_experiment, write_outputs, ExperimentConfig};
use slang_core::train::Method;

#[derive(Parser)]
#[command(name = "slang", version, about = "Low-rank natural-gradient variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every split and restart of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory (default: results/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        eval_mc: Option<usize>,
        /// Also write timings.csv (wall-clock, not reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Write means, marginal variances and covariances of two saved states.
    DumpCov {
        state: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the structured kernels against dense linear algebra.
    Selftest {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown method {s:?}"))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            epochs,
            splits,
            restarts,
            method,
            rank,
            eval_mc,
            timings,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = splits {
                cfg.splits = v;
            }
            if let Some(v) = restarts {
                cfg.restarts = v;
            }
            if let Some(v) = method {
                cfg.method = parse_method(&v)?;
            }
            if let Some(v) = rank {
                cfg.optimizer.rank = v;
            }
            if let Some(v) = eval_mc {
                cfg.eval_mc = v;
            }
            cfg.validate().map_err(|e| e.to_string())?;
            let base = config.parent().unwrap_or(Path::new("."));
            let out = out.unwrap_or_else(|| {
                let stem = if cfg.name.is_empty() {
                    config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                } else {
                    cfg.name.clone()
                };
                PathBuf::from("results").join(stem)
            });
            let results = run_experiment(&cfg, base, seed).map_err(|e| e.to_string())?;
            let summary = write_outputs(&cfg, seed, &results, &out, timings).map_err(|e| e.to_string())?;
            eprintln!("{} runs, {} failed", summary.runs, summary.failed);
            if let Some(a) = &summary.neg_elbo {
                eprintln!("neg ELBO / N  {:.4} ± {:.4}", a.mean, a.stderr);
            }
            if let Some(a) = &summary.test_nll {
                eprintln!("test NLL      {:.4} ± {:.4}", a.mean, a.stderr);
            }
            if let Some(a) = &summary.symmetric_kl {
                eprintln!("symmetric KL  {:.4} ± {:.4}", a.mean, a.stderr);
            }
            if let Some(a) = &summary.rmse {
                eprintln!("test RMSE     {:.4} ± {:.4}", a.mean, a.stderr);
            }
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::DumpCov { state, reference, out } => {
            let s = load_state(&state).map_err(|e| format!("{}: {e}", state.display()))?;
            let r = load_state(&reference).map_err(|e| format!("{}: {e}", reference.display()))?;
            dump_covariance(&s, &r, &out).map_err(|e| e.to_string())
        }
        Command::Selftest { cases, seed } => {
            let checks = slang_core::selftest::run(seed, cases).map_err(|e| e.to_string())?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{} {:<48} worst {:.3e} (tol {:.0e}, {} cases)",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.tolerance,
                    c.cases
                );
                ok &= c.passed();
            }
            if ok {
                Ok(())
            } else {
                Err("self-test failed".into())
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
