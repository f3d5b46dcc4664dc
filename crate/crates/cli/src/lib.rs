//! The `kite` command line: argument parsing, dispatch and exit codes.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kite_core::{CoreError, ErrorClass, Result};

use commands::{DataPaths, EvalInputs, TrainInputs, TrainSplit};
use config::RunConfig;
use manifest::Run;

#[derive(Debug, Parser)]
#[command(name = "kite", version, about = "Drug-drug interaction event classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; replaces `seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "kite-out")]
    pub out_dir: PathBuf,
    /// Worker threads. Computation is single-threaded; the value is
    /// validated and recorded in the manifest.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub drugs: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
}

impl DataArgs {
    fn paths(&self) -> DataPaths<'_> {
        DataPaths {
            drugs: &self.drugs,
            events: &self.events,
            labels: &self.labels,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub splits: PathBuf,
    /// Vocabulary file; defaults to the pretrained checkpoint's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pretraining checkpoint whose embeddings and encoder are transferred.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Drug KG table (`.bin`, with its `.index` alongside).
    #[arg(long)]
    pub kg: Option<PathBuf>,
}

impl TrainArgs {
    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            data: self.data.paths(),
            splits: &self.splits,
            vocab: self.vocab.as_deref(),
            pretrained: self.pretrained.as_deref(),
            kg: self.kg.as_deref(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub splits: PathBuf,
    /// `train`, `u1`, `u2` or `fold<k>`.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub kg: Option<PathBuf>,
}

impl EvalArgs {
    fn inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            checkpoint: &self.checkpoint,
            data: self.data.paths(),
            splits: &self.splits,
            split: &self.split,
            kg: self.kg.as_deref(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fixture: drugs, events, labels, KG triples, corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Build a token vocabulary from a SMILES corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Also count the SMILES of a drug table.
        #[arg(long)]
        drugs: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train TransE embeddings on a triple file.
    KgTrain {
        #[arg(long)]
        triples: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the drug rows of an entity table.
    KgExport {
        /// `entities.bin` written by kg-train.
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        drugs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Hold out test drugs and build U1, U2 and cross-validation folds.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Masked-token pretraining of embeddings and encoder.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the classifier.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Train on the pool minus this fold and select on it.
        #[arg(long, conflicts_with = "eval_split")]
        fold: Option<usize>,
        /// Select the best epoch on this split.
        #[arg(long)]
        eval_split: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics, ROC and PR curves of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Shrinking-training-set series: retrain on each step, score U1 and U2.
    Sts {
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy by token-length bin.
    Seqlen {
        #[command(flatten)]
        args: EvalArgs,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Vocab { .. } => "vocab",
            Command::KgTrain { .. } => "kg-train",
            Command::KgExport { .. } => "kg-export",
            Command::Split { .. } => "split",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sts { .. } => "sts",
            Command::Seqlen { .. } => "seqlen",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Vocab { common, .. }
            | Command::KgTrain { common, .. }
            | Command::KgExport { common, .. }
            | Command::Split { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sts { common, .. }
            | Command::Seqlen { common, .. } => common,
        }
    }
}

/// Parsed command line to finished run; returns the manifest summary.
pub fn execute(cli: Cli, args: Vec<String>) -> Result<serde_json::Value> {
    let c = cli.command.common();
    let config = RunConfig::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let run = Run::start(cli.command.name(), args, &c.out_dir, config, c.threads, c.quiet)?;
    match &cli.command {
        Command::Synth { .. } => commands::synth(run),
        Command::Vocab { corpus, drugs, .. } => commands::vocab(run, corpus, drugs.as_deref()),
        Command::KgTrain { triples, .. } => commands::kg_train(run, triples),
        Command::KgExport { entities, drugs, .. } => commands::kg_export(run, entities, drugs),
        Command::Split { data, .. } => commands::split(run, &data.paths()),
        Command::Pretrain { corpus, vocab, .. } => commands::pretrain(run, corpus, vocab),
        Command::Train {
            args, fold, eval_split, ..
        } => {
            let which = match (fold, eval_split) {
                (Some(k), _) => TrainSplit::Fold(*k),
                (None, Some(name)) => TrainSplit::Named(name),
                (None, None) => TrainSplit::Pool,
            };
            commands::train(run, &args.inputs(), which)
        }
        Command::Eval { args, .. } => commands::eval(run, &args.inputs()),
        Command::Sts { args, .. } => commands::sts(run, &args.inputs()),
        Command::Seqlen { args, .. } => commands::seqlen(run, &args.inputs()),
    }
}

/// Runs a full argument vector (program name first).
pub fn run_args<I, S>(args: I) -> Result<serde_json::Value>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| CoreError::Config(e.to_string()))?;
    execute(cli, args)
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &CoreError) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

/// `kite: error[<class>]: <message>` on one line.
pub fn error_line(e: &CoreError) -> String {
    let class = match e.class() {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numeric => "numeric",
    };
    let text = e.to_string();
    let text = text
        .strip_prefix("config: ")
        .or_else(|| text.strip_prefix("data: "))
        .unwrap_or(&text);
    let message = text.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("kite: error[{class}]: {message}")
}
