use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgemap_cli::{
    cmd_compare, cmd_eval, cmd_gen_traces, cmd_train, load_config, render_compare_table, CliError,
    Overrides,
};
use edgemap_core::config::PolicyKind;

#[derive(Parser)]
#[command(name = "edgemap", about = "Edge-map offloading simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for results and the resolved config echo.
    #[arg(long)]
    out: PathBuf,
    /// Base seed override (also reseeds the scenario).
    #[arg(long)]
    seed: Option<u64>,
    /// Coverage requirement override.
    #[arg(long)]
    beta: Option<f64>,
    /// Vehicle count override.
    #[arg(long)]
    vehicles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic trace file for the configured scenario.
    GenTraces {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Online-train the offloading agent inside the simulator.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Pre-generated trace file (otherwise generated from config).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Number of training decisions.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate policies on identical traces and seeds.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Policy to run (repeatable): head, eo, lp, ro, rm.
        #[arg(long = "policy")]
        policies: Vec<String>,
        /// Number of evaluation seeds per policy.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Trained checkpoint, required for the head policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate latency files from run directories into a comparison table.
    Compare {
        /// Run directories; the first is the reduction baseline.
        dirs: Vec<PathBuf>,
        /// Optional file to write the table to (also printed).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTraces { common } => {
            let ov = Overrides {
                seed: common.seed,
                beta: common.beta,
                vehicles: common.vehicles,
                train_steps: None,
            };
            let cfg = load_config(common.config.as_deref(), &ov)?;
            let path = cmd_gen_traces(&cfg, &common.out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train { common, trace, steps, resume } => {
            let ov = Overrides {
                seed: common.seed,
                beta: common.beta,
                vehicles: common.vehicles,
                train_steps: steps,
            };
            let cfg = load_config(common.config.as_deref(), &ov)?;
            cmd_train(&cfg, &common.out, trace.as_deref(), resume.as_deref())?;
            println!("checkpoint written to {}", common.out.join("checkpoint.bin").display());
            Ok(())
        }
        Command::Eval { common, trace, policies, seeds, checkpoint } => {
            let ov = Overrides {
                seed: common.seed,
                beta: common.beta,
                vehicles: common.vehicles,
                train_steps: None,
            };
            let cfg = load_config(common.config.as_deref(), &ov)?;
            let kinds: Vec<PolicyKind> = if policies.is_empty() {
                cfg.eval.policies.clone()
            } else {
                policies
                    .iter()
                    .map(|s| PolicyKind::parse(s))
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Config(e.to_string()))?
            };
            let summaries =
                cmd_eval(&cfg, &common.out, trace.as_deref(), &kinds, seeds, checkpoint.as_deref())?;
            for s in &summaries {
                println!(
                    "{} seed {}: mean {:.1} ms over {} tasks (scheduled ratio {:.2})",
                    s.policy, s.seed, s.mean_latency_ms, s.completed, s.scheduled_ratio_mean
                );
            }
            Ok(())
        }
        Command::Compare { dirs, out } => {
            let rows = cmd_compare(&dirs)?;
            let table = render_compare_table(&rows);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| {
                    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
                })?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
