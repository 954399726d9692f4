use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dedetr::cli;
use dedetr::Result;

#[derive(Parser)]
#[command(name = "dedetr", version, about = "Data-efficient detection transformer on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes metrics.csv, final.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, one run each.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate a checkpoint; writes eval.json and eval.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// NMS thresholds as start:stop:step; writes nms_sweep.csv.
        #[arg(long)]
        nms_sweep: Option<String>,
    },
    /// Train and evaluate every grid cell and seed; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Run the built-in oracle suite.
    Selftest,
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { config, out, seeds } => {
            let seeds = seeds.as_deref().map(cli::parse_seeds).transpose()?;
            for run in cli::cmd_train(&config, out.as_deref(), seeds.as_deref())? {
                let last = run.rows.last().expect("at least one epoch");
                println!(
                    "seed {}: loss {:.4}, ap {:.4}, ap50 {:.4}, best epoch {} -> {}",
                    run.seed,
                    last.loss.total,
                    last.eval.ap,
                    last.eval.ap50,
                    run.best_epoch,
                    run.dir.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            nms_sweep,
        } => {
            let sweep = nms_sweep.as_deref().map(cli::parse_sweep).transpose()?;
            let (e, rows) = cli::cmd_eval(&checkpoint, config.as_deref(), out.as_deref(), sweep.as_deref())?;
            println!("ap {:.4}  ap50 {:.4}  ap75 {:.4}", e.result.ap, e.result.ap50, e.result.ap75);
            for (t, r) in rows {
                println!("nms {t}: ap {:.4}  ap50 {:.4}  ap75 {:.4}", r.ap, r.ap50, r.ap75);
            }
        }
        Command::Ablate { config, out, seeds } => {
            let seeds = seeds.as_deref().map(cli::parse_seeds).transpose()?;
            let results = cli::cmd_ablate(&config, out.as_deref(), seeds.as_deref())?;
            print!("{}", cli::summary_csv(&cli::summarize(&results)));
        }
        Command::Selftest => {
            let report = cli::cmd_selftest();
            print!("{}", report.render());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
