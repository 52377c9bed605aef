//! `semkge`: dataset filtering, training, evaluation and grid search from a config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semkge::eval::{RankMode, TieBreak};
use semkge::ingest::DatasetPaths;
use semkge::losses::{LossFamily, Variant};
use semkge::models::ModelKind;
use semkge::{Regularizer, Split};

use commands::{Failure, Outcome, ResultExt};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "semkge", version, about = "Schema-aware knowledge graph embedding training and evaluation")]
struct Cli {
    /// Worker threads (default: all cores). `--threads 1` gives bit-exact reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the schema-aware dataset filter and write the result with its statistics.
    Filter(Common),
    /// Train one model and keep the checkpoint with the best validation MRR.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Checkpoint to evaluate (default: `<output dir>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        ties: Option<TiesArg>,
        /// Comma-separated cut-offs for Hits@K and Sem@K.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Built-in bucket spec name or path to a bucket JSON file.
        #[arg(long)]
        buckets: Option<String>,
        /// Also write one JSON line per query to `ranks.jsonl`.
        #[arg(long)]
        dump_ranks: bool,
    },
    /// Train every cell of the `[grid]` section and rank them by validation MRR.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Print dataset size statistics.
    Stats {
        /// Config file whose `[data]` section names the dataset.
        #[arg(short, long, required_unless_present = "data", conflicts_with = "data")]
        config: Option<PathBuf>,
        /// Directory holding the six standard dataset files.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write `stats.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Row label in the printed table.
        #[arg(long, default_value = "dataset")]
        name: String,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, overriding `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags that win over `[train]` values.
#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long, value_parser = parse::<ModelKind>)]
    model: Option<ModelKind>,
    #[arg(long, value_parser = parse::<LossFamily>)]
    loss: Option<LossFamily>,
    /// vanilla, S or S'.
    #[arg(long, value_parser = parse::<Variant>)]
    variant: Option<Variant>,
    /// Semantic factor.
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    /// Hinge margin.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse::<Regularizer>)]
    regularizer: Option<Regularizer>,
    #[arg(long)]
    reg_weight: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Master seed (initialisation, shuffling, negatives).
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Seed of the stochastic relabelling draws.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    loss_seed: Option<u64>,
}

fn parse<T: std::str::FromStr<Err = semkge::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: semkge::Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Raw,
    Filtered,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TiesArg {
    Optimistic,
    Pessimistic,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag {
                    t.$($field).+ = v;
                }
            };
        }
        set!(model => model);
        set!(loss => loss.family);
        set!(variant => loss.variant);
        set!(epsilon => loss.epsilon);
        set!(gamma => loss.margin);
        set!(lr => lr);
        set!(dim => dim);
        set!(batch_size => batch_size);
        set!(regularizer => regularizer);
        set!(reg_weight => reg_weight);
        set!(epochs => max_epochs);
        set!(eval_every => eval_every);
        set!(seed => seed);
        set!(loss_seed => loss.seed);
    }
}

fn load_config(common: &Common, overrides: Option<&TrainOverrides>) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).invalid()?;
    if let Some(o) = overrides {
        o.apply(&mut cfg);
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Validation(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
    }
    match cli.command {
        Command::Filter(common) => commands::filter(&load_config(&common, None)?),
        Command::Train { common, overrides } => commands::train(&load_config(&common, Some(&overrides))?),
        Command::Grid { common, overrides } => commands::grid(&load_config(&common, Some(&overrides))?),
        Command::Eval {
            common,
            overrides,
            checkpoint,
            split,
            mode,
            ties,
            ks,
            buckets,
            dump_ranks,
        } => {
            let mut cfg = load_config(&common, Some(&overrides))?;
            let e = &mut cfg.eval;
            if let Some(s) = split {
                e.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                };
            }
            if let Some(m) = mode {
                e.mode = match m {
                    ModeArg::Raw => RankMode::Raw,
                    ModeArg::Filtered => RankMode::Filtered,
                };
            }
            if let Some(t) = ties {
                e.ties = match t {
                    TiesArg::Optimistic => TieBreak::Optimistic,
                    TiesArg::Pessimistic => TieBreak::Pessimistic,
                };
            }
            if let Some(ks) = ks {
                e.ks = ks;
            }
            if buckets.is_some() {
                e.buckets = buckets;
            }
            commands::eval(&cfg, checkpoint, dump_ranks)
        }
        Command::Stats { config, data, out, name } => {
            let paths = match (config, data) {
                (Some(c), _) => RunConfig::load(&c).and_then(|cfg| cfg.dataset_paths()).invalid()?,
                (None, Some(d)) => DatasetPaths::in_dir(&d),
                (None, None) => unreachable!("clap requires one of --config and --data"),
            };
            commands::stats_cmd(&paths, &name, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code() as u8)
        }
    }
}
