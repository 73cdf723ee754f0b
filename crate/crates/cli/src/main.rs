mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lionrank::ir_eval::Gain;
use lionrank::optim::OptimizerKind;

use crate::config::Overrides;

/// Output root used when `--out` is not given.
pub const OUT_ENV: &str = "LIONRANK_OUT";

#[derive(Parser)]
#[command(
    name = "lionrank",
    version,
    about = "Train, rerank and evaluate small cross-encoders with Lion or AdamW"
)]
struct Cli {
    /// Output root directory [env: LIONRANK_OUT, default: runs]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    config: PathBuf,
    /// Train only this optimizer.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Base learning rate for every optimizer.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            optimizer: self.optimizer,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured optimizer, writing per-epoch checkpoints.
    Train(TrainFlags),
    /// Rescore a candidate run with a checkpoint.
    Rerank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `id<TAB>text` file.
        #[arg(long)]
        queries: PathBuf,
        /// `id<TAB>text` file.
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Defaults to `<out>/<checkpoint name>.run`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Minimum grade counted as relevant by the binary metrics.
        #[arg(long, default_value_t = 1)]
        binarize_at: u32,
        #[arg(long, value_enum, default_value = "linear")]
        gain: GainArg,
    },
    /// Compare optimizer step cost and state size.
    BenchOptim {
        /// Train both optimizers from this config and time their steps.
        #[arg(long, conflicts_with = "import", required_unless_present = "import")]
        config: Option<PathBuf>,
        /// Read `label mean peak std data_points [state_bytes]` rows instead.
        #[arg(long)]
        import: Option<PathBuf>,
        #[arg(long, default_value = "adamw")]
        baseline: String,
        #[arg(long, default_value = "lion")]
        candidate: String,
        #[command(flatten)]
        flags: BenchFlags,
    },
    /// Write a seeded separable corpus plus a matching config.
    SyntheticData {
        /// Defaults to `<out>/synthetic`.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        triplets: usize,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long, default_value_t = 50)]
        candidates: usize,
        #[arg(long, default_value_t = 5)]
        relevant: usize,
    },
    /// Tabulate metric JSON files from `eval` side by side.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct BenchFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum GainArg {
    Linear,
    Exponential,
}

impl From<GainArg> for Gain {
    fn from(g: GainArg) -> Self {
        match g {
            GainArg::Linear => Gain::Linear,
            GainArg::Exponential => Gain::Exponential,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();

    let out = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    let result = match cli.command {
        Command::Train(f) => commands::train(&f.config, &f.overrides(), &out),
        Command::Rerank {
            checkpoint,
            queries,
            passages,
            candidates,
            output,
        } => commands::rerank(&checkpoint, &queries, &passages, &candidates, output.as_deref(), &out),
        Command::Eval {
            run,
            qrels,
            k,
            binarize_at,
            gain,
        } => commands::eval(&run, &qrels, k, binarize_at, gain.into(), &out),
        Command::BenchOptim {
            config,
            import,
            baseline,
            candidate,
            flags,
        } => match (config, import) {
            (_, Some(path)) => commands::bench_import(&path, &baseline, &candidate, &out),
            (Some(path), None) => {
                let o = Overrides {
                    epochs: flags.epochs,
                    seed: flags.seed,
                    ..Overrides::default()
                };
                commands::bench_config(&path, &o, &baseline, &candidate, &out)
            }
            (None, None) => unreachable!("clap requires one of --config/--import"),
        },
        Command::SyntheticData {
            dir,
            seed,
            triplets,
            queries,
            candidates,
            relevant,
        } => {
            let cfg = lionrank::synth::SynthConfig {
                seed,
                n_triplets: triplets,
                n_eval_queries: queries,
                candidates_per_query: candidates,
                relevant_per_query: relevant,
            };
            commands::synthetic_data(&cfg, &dir.unwrap_or_else(|| out.join("synthetic")))
        }
        Command::Report { metrics } => commands::report(&metrics),
    };

    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
