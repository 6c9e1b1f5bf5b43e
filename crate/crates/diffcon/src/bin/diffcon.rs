//! Thin CLI over the experiment harness.
//!
//! `diffcon pretrain|finetune|eval|oracle --config <path> [--seed N] [--out DIR]`
//!
//! Environment:
//! - `DIFFCON_THREADS` caps rollout workers.
//! - `DIFFCON_WALLCLOCK=1` logs real wallclock milliseconds in training CSVs
//!   (off by default so identical runs produce byte-identical outputs).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffcon::harness::{cmd_eval, cmd_finetune, cmd_oracle, cmd_pretrain, ExperimentConfig};
use diffcon::harness::{FINETUNED_FILE, PRETRAINED_FILE};
use diffcon::rlft::Clock;

#[derive(Parser)]
#[command(name = "diffcon", about = "Diffusion fine-tuning lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (also where checkpoints are looked up).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the pretrained score model on the configured synthetic data.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a controller on top of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint (defaults to <out>/pretrained.ckpt).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Paired evaluation of a fine-tuned checkpoint against the pretrained one.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint (defaults to <out>/finetuned.ckpt).
        #[arg(long)]
        finetuned: Option<PathBuf>,
        /// Pretrained checkpoint (defaults to <out>/pretrained.ckpt).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Dump exact oracle tables for the configured tabular chain.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> diffcon::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn clock() -> Clock {
    if std::env::var("DIFFCON_WALLCLOCK").map(|v| v == "1").unwrap_or(false) {
        Clock::Real
    } else {
        Clock::Deterministic
    }
}

fn run() -> diffcon::Result<()> {
    if let Ok(threads) = std::env::var("DIFFCON_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let ckpt = cmd_pretrain(&cfg, &common.out, clock())?;
            println!("wrote {}", ckpt.display());
        }
        Command::Finetune { common, pretrained } => {
            let cfg = load_config(&common)?;
            let pre = pretrained.unwrap_or_else(|| common.out.join(PRETRAINED_FILE));
            let ckpt = cmd_finetune(&cfg, &pre, &common.out, clock())?;
            println!("wrote {}", ckpt.display());
        }
        Command::Eval {
            common,
            finetuned,
            pretrained,
        } => {
            let cfg = load_config(&common)?;
            let ft = finetuned.unwrap_or_else(|| common.out.join(FINETUNED_FILE));
            let pre = pretrained.unwrap_or_else(|| common.out.join(PRETRAINED_FILE));
            let report = cmd_eval(&cfg, &ft, &pre, &common.out)?;
            for row in &report.rows {
                println!(
                    "lambda_model={} win_rate={:.4} +/- {:.4} (n={})",
                    row.lambda_model, row.win_rate, row.wr_ci, row.n
                );
            }
            println!(
                "best: lambda_model={} win_rate={:.4}",
                report.best.lambda_model, report.best.win_rate
            );
        }
        Command::Oracle { common } => {
            let cfg = load_config(&common)?;
            cmd_oracle(&cfg, &common.out)?;
            println!("wrote oracle tables to {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
