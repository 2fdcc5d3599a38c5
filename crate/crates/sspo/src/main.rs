//! Command-line front end for the duration-alignment experiments.

use clap::{Parser, Subcommand};
use sspo::cli::{self, CliError, RunConfig, SweepKind, TrainerKind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sspo",
    about = "Segment-supervised preference optimization for duration-aligned dubbing translation, at desk scale"
)]
struct Args {
    /// Keyed TOML config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (data, SFT, sampling, training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampling/training worker threads (1 = reproducibility mode).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root (default: $SSPO_OUT_DIR or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic task: splits, duration table, quality key.
    GenData,
    /// Supervised fine-tuning on the demonstration split.
    Sft,
    /// Segment-wise preference sampling from an SFT checkpoint.
    Sample {
        /// Policy checkpoint (defaults to this config's SFT checkpoint).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Align an SFT model with the selected trainer.
    Train {
        #[arg(long, value_enum, default_value_t = TrainerKind::Sspo)]
        trainer: TrainerKind,
    },
    /// Greedy-decode the test split and report duration metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Per-line duration differences and binned counts for a checkpoint.
    Histogram {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Sweep one factor and report (value, P, efficient rate) rows.
    Ablation {
        #[arg(long, value_enum)]
        sweep: SweepKind,
    },
    /// Full run: SFT, sampling, training, evaluation, reports.
    Pipeline {
        #[arg(long, value_enum, default_value_t = TrainerKind::Sspo)]
        trainer: TrainerKind,
    },
}

fn load_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn run(args: Args) -> Result<(), CliError> {
    let cfg = load_config(&args)?;
    let out = args.out.clone().unwrap_or_else(cli::default_out_dir);

    if cfg.workers > 0 {
        // Ignore the error if a global pool already exists (e.g. tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }

    match args.cmd {
        Cmd::GenData => {
            let dir = cli::cmd_gen_data(&cfg, &out)?;
            println!("wrote dataset to {}", dir.display());
        }
        Cmd::Sft => {
            let path = cli::cmd_sft(&cfg, &out)?;
            println!("wrote SFT checkpoint to {}", path.display());
        }
        Cmd::Sample { policy } => {
            let path = cli::cmd_sample(&cfg, policy.as_deref(), &out)?;
            println!("wrote sampled pairs to {}", path.display());
        }
        Cmd::Train { trainer } => {
            let outcome = cli::run_pipeline(&cfg, trainer, Some(&out))?;
            println!(
                "trained {}: held-out P {:.4} (SFT {:.4}, bound {:.4})",
                outcome.trainer,
                outcome.trained.trained_eval.metrics.mean_penalty,
                outcome.sft_eval.metrics.mean_penalty,
                outcome.alignment_bound
            );
        }
        Cmd::Eval { ckpt } => {
            let path = cli::cmd_eval(&cfg, &ckpt, &out)?;
            println!("wrote evaluation to {}", path.display());
        }
        Cmd::Histogram { ckpt } => {
            let path = cli::cmd_histogram(&cfg, &ckpt, &out)?;
            println!("wrote histogram to {}", path.display());
        }
        Cmd::Ablation { sweep } => {
            let path = cli::cmd_ablation(&cfg, sweep, &out)?;
            println!("wrote ablation to {}", path.display());
        }
        Cmd::Pipeline { trainer } => {
            let outcome = cli::run_pipeline(&cfg, trainer, Some(&out))?;
            let m = &outcome.trained.trained_eval.metrics;
            println!(
                "pipeline {} [{}]: P {:.4} | CR {:.4} | efficient {:.4} | SFT P {:.4} | bound {:.4}",
                outcome.trainer,
                outcome.config_hash,
                m.mean_penalty,
                m.cr,
                m.efficient_rate,
                outcome.sft_eval.metrics.mean_penalty,
                outcome.alignment_bound
            );
        }
    }
    Ok(())
}

fn main() {
    let args = Args::parse();
    if let Err(e) = run(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
