use clap::{Parser, Subcommand};
use slip::harness::{self, Overrides};
use slip::trainer::TrainMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "slip", about = "Joint language-image + self-supervised pre-training, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes-and-colors corpus from a spec file
    GenData {
        /// SynthSpec JSON
        #[arg(long)]
        config: PathBuf,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) a pre-training experiment
    Pretrain {
        /// Experiment JSON config
        #[arg(long)]
        config: PathBuf,
        /// Continue from the newest checkpoint in the run directory
        #[arg(long)]
        resume: bool,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<String>,
        /// Override the training mode (slip|clip|simclr|decoupled|ssl_then_clip)
        #[arg(long = "mode-override")]
        mode_override: Option<String>,
    },
    /// Evaluate a checkpoint: zero-shot, linear probe, finetune
    Evaluate {
        /// Evaluation JSON config
        #[arg(long)]
        config: PathBuf,
        /// Summary output path (default: <checkpoint>.eval.json)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks over every differentiable op and loss
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, harness::HarnessError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| harness::HarnessError::Config(format!("unknown mode {s:?}")))
}

fn run(cli: Cli) -> Result<(), harness::HarnessError> {
    match cli.command {
        Command::GenData { config, out } => {
            let outcome = harness::cmd_gen_data(&config, &out)?;
            println!(
                "wrote {} train + {} eval records over {} classes to {}",
                outcome.train_records,
                outcome.eval_records,
                outcome.classes,
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            resume,
            seed,
            out,
            mode_override,
        } => {
            let overrides = Overrides {
                seed,
                out,
                mode: mode_override.as_deref().map(parse_mode).transpose()?,
            };
            let outcome = harness::cmd_pretrain(&config, resume, &overrides)?;
            if let Some(m) = &outcome.final_metrics {
                println!(
                    "finished {} steps: total {:.4} clip {:.4} ssl {:.4}",
                    outcome.total_steps, m.total_loss, m.clip_loss, m.ssl_loss
                );
            }
            if let Some(acc) = outcome.last_zeroshot {
                println!("last zero-shot monitor accuracy: {acc:.4}");
            }
            println!("run directory: {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Evaluate { config, out } => {
            let summary = harness::cmd_evaluate(&config, out.as_deref())?;
            println!("checkpoint: {} (step {})", summary.checkpoint, summary.step);
            if let Some(a) = summary.zeroshot_acc {
                println!("zero-shot accuracy: {a:.4}");
            }
            if let Some(a) = summary.probe_acc {
                println!("linear-probe accuracy: {a:.4}");
            }
            if let Some(a) = summary.finetune_acc {
                println!("finetune accuracy:  {a:.4}");
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let outcome = harness::cmd_gradcheck(seed)?;
            for r in &outcome.reports {
                println!(
                    "{:<22} {:?}  max rel err {:>12.3e}  (tol {:.0e})  {}",
                    r.op,
                    r.precision,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            if outcome.all_passed {
                println!("all gradient checks passed");
                Ok(())
            } else {
                Err(harness::HarnessError::Config(
                    "gradient checks failed".into(),
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    harness::init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
