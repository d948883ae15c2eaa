use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdr_adapt::commands::*;
use hdr_adapt::config::RunConfig;
use hdr_adapt::{Error, Result};

/// Synthetic-to-real HDR fusion pipeline.
#[derive(Debug, Parser)]
#[command(name = "s2r", version, about)]
struct Cli {
    /// JSON run config; omitted sections take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-sequence work.
    #[arg(short, long, global = true, env = "S2R_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate procedural sequences and a manifest.
    Gen {
        #[arg(short, long)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Synthesize an exposure bracket for every sequence.
    Synth {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Dataset diversity metrics.
    Analyze {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a fusion network from scratch.
    Train {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fine-tune every weight of a checkpoint.
    Finetune {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Inject adapters and train them on labeled target data.
    Adapt {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a checkpoint over a manifest.
    Predict {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Single-pass test-time adaptation over an unlabeled stream.
    Tta {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        predictions: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fold adapters into the base weights.
    Merge {
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the adaptation and test-time ablation matrix.
    Ablate {
        matrix: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen { n, out } => cmd_gen(&cfg, *n, out),
        Command::Synth { manifest, out } => cmd_synth(&cfg, manifest, out),
        Command::Analyze { manifest, out } => cmd_analyze(&cfg, manifest, out),
        Command::Train { manifest, out } => cmd_train(&cfg, manifest, out),
        Command::Finetune { checkpoint, manifest, out } => cmd_finetune(&cfg, checkpoint, manifest, out),
        Command::Adapt { checkpoint, manifest, out } => cmd_adapt(&cfg, checkpoint, manifest, out),
        Command::Predict { checkpoint, manifest, out } => cmd_predict(&cfg, checkpoint, manifest, out),
        Command::Tta { checkpoint, manifest, out } => cmd_tta(&cfg, checkpoint, manifest, out),
        Command::Eval { predictions, manifest, out } => cmd_eval(&cfg, predictions, manifest, out),
        Command::Merge { checkpoint, out } => cmd_merge(&cfg, checkpoint, out),
        Command::Ablate { matrix, out } => cmd_ablate(&cfg, matrix, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
