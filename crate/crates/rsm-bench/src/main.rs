use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsm_bench::config::{ExperimentConfig, ExperimentKind};
use rsm_bench::{execute, BenchError};

#[derive(Parser)]
#[command(name = "rsm-bench", version, about = "Reward score matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimator RMSE against the exact optimal guidance.
    Bench(Common),
    /// Per-method weighting schedules and influence curves.
    Schedules(Common),
    /// Pretrain a reference score network and fine-tune it.
    Train(Common),
    /// Kernel-equivalence, identity and oracle checks.
    Audit(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration's seed; for `train` it also replaces the
    /// pretraining and fine-tuning seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn run(kind: ExperimentKind, args: &Common) -> Result<String, BenchError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.kind != kind {
        return Err(BenchError::Invalid(format!(
            "configuration kind {:?} does not match the subcommand ({kind:?})",
            cfg.kind
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        if kind == ExperimentKind::Train {
            cfg.train.pretrain.seed = seed;
            cfg.train.finetune.seed = seed;
        }
    }
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(BenchError::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BenchError::Invalid(format!("thread pool: {e}")))?;
    }
    execute(&cfg, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Bench(a) => (ExperimentKind::RmseBench, a),
        Command::Schedules(a) => (ExperimentKind::ScheduleDump, a),
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Audit(a) => (ExperimentKind::KernelAudit, a),
    };
    match run(kind, args) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
