use std::path::PathBuf;
use std::process::ExitCode;

use apa::error::ApaError;
use apa::experiment::{run_experiment, Command, ExperimentConfig};
use apa::partition::PartitionStrategy;
use apa::weighting::{AggregationLevel, WeightingStrategy};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Partitioned adapter training with exact unlearning and per-sample
/// adapter aggregation.
#[derive(Parser)]
#[command(name = "apa", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or load) the data and write the train/valid/test splits.
    Synth(Common),
    /// Embed the training set and split it into balanced shards.
    Partition(Common),
    /// Train one adapter per shard and build the validation cache.
    Train(Common),
    /// Score every path on the test split and write the reports.
    Eval(Common),
    /// Aggregated predictions for a file, or for the test split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Erase training samples and retrain the shards that held them.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
    },
    /// Inference and unlearning timings plus the shard-size sweep.
    Bench(Common),
    /// Synth, partition, train and eval in one go.
    Run(Common),
    /// Print the effective config as TOML.
    Config(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Decomposition,
    Nondecomposition,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Adaptive,
    Average,
    Major,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Semantic,
    Random,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Number of shards (K).
    #[arg(long)]
    shards: Option<usize>,
    /// Per-shard capacity (t).
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, value_enum)]
    partition_strategy: Option<Split>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Training seed; shard seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature of the weighting.
    #[arg(long)]
    tau: Option<f64>,
    /// Validation neighbors per query.
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long, value_enum)]
    level: Option<Level>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ApaError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.shards {
            cfg.partition.shards = v;
        }
        if let Some(v) = self.capacity {
            cfg.partition.capacity = Some(v);
        }
        if let Some(v) = self.partition_strategy {
            cfg.partition.strategy = match v {
                Split::Semantic => PartitionStrategy::Semantic,
                Split::Random => PartitionStrategy::Random,
            };
        }
        if let Some(v) = self.rank {
            cfg.train.rank = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.tau {
            cfg.aggregation.tau = v;
        }
        if let Some(v) = self.neighbors {
            cfg.aggregation.neighbors = v;
        }
        if let Some(v) = self.level {
            cfg.aggregation.level = match v {
                Level::Decomposition => AggregationLevel::Decomposition,
                Level::Nondecomposition => AggregationLevel::Nondecomposition,
                Level::Concat => AggregationLevel::Concat,
            };
        }
        if let Some(v) = self.strategy {
            cfg.aggregation.strategy = match v {
                Strategy::Adaptive => WeightingStrategy::Adaptive,
                Strategy::Average => WeightingStrategy::Average,
                Strategy::Major => WeightingStrategy::Major,
                Strategy::Semantic => WeightingStrategy::Semantic,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ApaError> {
    let (common, command) = match cli.command {
        Cmd::Synth(c) => (c, Command::Synth),
        Cmd::Partition(c) => (c, Command::Partition),
        Cmd::Train(c) => (c, Command::Train),
        Cmd::Eval(c) => (c, Command::Eval),
        Cmd::Predict { common, input } => (common, Command::Predict { input }),
        Cmd::Unlearn { common, ids } => (common, Command::Unlearn { ids }),
        Cmd::Bench(c) => (c, Command::Bench),
        Cmd::Run(c) => (c, Command::Run),
        Cmd::Config(c) => {
            print!("{}", c.resolve()?.to_toml_string()?);
            return Ok(());
        }
    };
    let cfg = common.resolve()?;
    let outcome = run_experiment(&cfg, &command)?;
    let json = serde_json::to_string_pretty(&outcome).map_err(|e| ApaError::json("print outcome", e))?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; 2 is reserved for invariant violations.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
