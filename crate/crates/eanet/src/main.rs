use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eanet::commands::{self, MetricOp};
use eanet::config::RunConfig;
use eanet::{fmt_f64, Error, Result};

#[derive(Parser)]
#[command(name = "eanet", version, about = "Evolving-attention time-series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Rank,
    Reldiff,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-reconstruction pre-training.
    Pretrain(RunArgs),
    /// Trains the task head and encoder, optionally from a checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint whose matching parameters initialize the model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores a checkpoint on the configured data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seed: u64,
    },
    /// Runs the invariant suite.
    Selftest,
    /// Writes attention logits and probabilities of one series as CSV.
    ExportAttn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the series within the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Output file; defaults to `attention.csv` in the output directory.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Aggregates a metrics table (datasets as rows, models as columns).
    Metrics {
        table: PathBuf,
        #[arg(long, value_enum, default_value = "reldiff")]
        op: Op,
        /// Treat larger values as better when ranking.
        #[arg(long)]
        higher_is_better: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(args) => println!("{}", commands::cmd_pretrain(&args.load()?)?),
        Command::Finetune { run, checkpoint } => {
            println!("{}", commands::cmd_finetune(&run.load()?, checkpoint.as_deref())?)
        }
        Command::Eval { run, checkpoint } => println!("{}", commands::cmd_eval(&run.load()?, &checkpoint)?),
        Command::Gradcheck { seed } => {
            let report = commands::cmd_gradcheck(seed);
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Selftest => {
            let report = commands::cmd_selftest();
            println!("{report}");
            return Ok(report.passed());
        }
        Command::ExportAttn {
            run,
            checkpoint,
            sample,
            file,
        } => {
            let cfg = run.load()?;
            let path = match file {
                Some(f) => f,
                None => {
                    std::fs::create_dir_all(&cfg.out).map_err(|source| Error::Io {
                        path: cfg.out.clone(),
                        source,
                    })?;
                    cfg.out.join("attention.csv")
                }
            };
            let rows = commands::cmd_export_attn(&cfg, &checkpoint, sample, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::Metrics {
            table,
            op,
            higher_is_better,
        } => {
            let op = match op {
                Op::Rank => MetricOp::Rank,
                Op::Reldiff => MetricOp::RelDiff,
            };
            for (model, value) in commands::cmd_metrics(&table, op, !higher_is_better)? {
                println!("{model},{}", fmt_f64(value));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
