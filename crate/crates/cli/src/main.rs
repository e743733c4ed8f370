use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vqseg::trainer::{self, EvaluateOptions, RunConfig, Split};

#[derive(Parser)]
#[command(name = "vqseg", version, about = "Vector-quantized semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Skip the quantizer (continuous bottleneck baseline).
        #[arg(long)]
        no_vq: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Override `train.run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write colorized predictions here.
        #[arg(long)]
        emit_png: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Score ground truth against itself (pipeline check; mIoU must be 1).
        #[arg(long)]
        gt_as_prediction: bool,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train and evaluate once per codebook size and seed; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        codebook_sizes: Vec<usize>,
        /// Defaults to `train.seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Run the built-in oracle and gradient checks.
    Selftest,
}

fn load(config: &std::path::Path, run_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(dir) = run_dir {
        cfg.train.run_dir = dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, no_vq, seed, run_dir } => {
            let mut cfg = load(&config, run_dir)?;
            cfg.train.no_vq |= no_vq;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let report = trainer::train(&cfg)?;
            let m = report.final_metrics();
            println!("mIoU {:.4}", m.miou);
            if let Some(cb) = m.codebook {
                println!("codebook usage {:.4} perplexity {:.3}", cb.usage, cb.perplexity);
            }
            println!("checkpoint {}", report.checkpoint.display());
            println!("wall clock {:.1}s", report.wall_clock_secs);
        }
        Command::Eval { config, checkpoint, emit_png, split, gt_as_prediction, run_dir } => {
            let cfg = load(&config, run_dir)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let opts = EvaluateOptions { split: Some(split), emit_png, gt_as_prediction };
            let m = trainer::evaluate(&cfg, &checkpoint, &opts)?;
            println!("{}", m.to_json()?);
        }
        Command::Ablate { config, codebook_sizes, seeds, run_dir } => {
            let cfg = load(&config, run_dir)?;
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let rows = trainer::ablate_codebook(&cfg, &codebook_sizes, &seeds)?;
            print!("{}", trainer::ablation_csv(&rows));
            for s in trainer::summarize_ablation(&rows) {
                println!(
                    "K={}: mIoU {:.4} ± {:.4}, min usage {:.3}",
                    s.num_codes, s.mean_miou, s.std_miou, s.min_usage
                );
            }
        }
        Command::Selftest => {
            let checks = vqseg::selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} self-checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
