//! Subcommand implementations. Each one validates everything it can before doing work.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use semkge::eval::RankLine;
use semkge::ingest::{filter_dataset, load_dataset, stats, write_dataset, DatasetPaths, DatasetStats};
use semkge::trainer::{grid_search_with, GridResult, Trainer};
use semkge::{evaluate, load_checkpoint, save_checkpoint, KnowledgeGraph, SemIndex, TrainConfig};

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const RANKS: &str = "ranks.jsonl";
pub const STATS: &str = "stats.json";
pub const GRID_CSV: &str = "grid.csv";

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, arguments or input files (exit code 1).
    Validation(anyhow::Error),
    /// Failure while doing the work (exit code 2).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub trait ResultExt<T> {
    /// Any error is a validation error.
    fn invalid(self) -> Outcome<T>;
    /// Library errors about inputs stay validation errors; everything else is a runtime failure.
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| {
            let e = e.into();
            match e.downcast_ref::<semkge::Error>() {
                Some(
                    semkge::Error::Config(_)
                    | semkge::Error::Usage(_)
                    | semkge::Error::Parse { .. }
                    | semkge::Error::Checkpoint(_),
                ) => Failure::Validation(e),
                _ => Failure::Runtime(e),
            }
        })
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .runtime()
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).runtime()?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()
}

fn load(paths: &DatasetPaths) -> Outcome<KnowledgeGraph> {
    let loaded = load_dataset(paths).runtime()?;
    if !loaded.warnings.is_empty() {
        log::warn!("{} schema lines referred to unknown names and were skipped", loaded.warnings.len());
    }
    Ok(loaded.kg)
}

pub fn filter(cfg: &RunConfig) -> Outcome {
    let paths = cfg.dataset_paths().invalid()?;
    paths.check_exist().invalid()?;
    let kg = load(&paths)?;
    let before = stats(&kg);
    let filtered = filter_dataset(&kg).runtime()?;
    let after = stats(&filtered);
    let out = &cfg.output.dir;
    create_dir(out)?;
    write_dataset(&filtered, out).runtime()?;

    #[derive(Serialize)]
    struct FilterStats {
        before: DatasetStats,
        after: DatasetStats,
    }
    write_json(&out.join(STATS), &FilterStats { before, after })?;
    let mut filtered_cfg = cfg.clone();
    filtered_cfg.data = Default::default();
    filtered_cfg.data.dir = Some(out.clone());
    filtered_cfg.echo(out).runtime()?;
    print!("{}", before.table("input"));
    print!("{}", after.table("filtered"));
    Ok(())
}

pub fn stats_cmd(paths: &DatasetPaths, name: &str, out: Option<&Path>) -> Outcome {
    paths.check_exist().invalid()?;
    let s = stats(&load(paths)?);
    print!("{}", s.table(name));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(STATS), &s)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    loss: &'a semkge::LossSpec,
    config: &'a TrainConfig,
}

pub fn train(cfg: &RunConfig) -> Outcome {
    cfg.validate().invalid()?;
    let kg = load(&cfg.dataset_paths().invalid()?)?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    cfg.echo(out).runtime()?;
    let outside = cfg.train.outside_search_space();
    if !outside.is_empty() {
        log::info!("outside the usual search space: {}", outside.join(", "));
    }

    let log_path = out.join(TRAIN_LOG);
    let file = File::create(&log_path)
        .with_context(|| format!("cannot create {}", log_path.display()))
        .runtime()?;
    let mut log = BufWriter::new(file);
    let header = LogHeader {
        loss: &cfg.train.loss,
        config: &cfg.train,
    };
    write_record(&mut log, &header).runtime()?;

    let trainer = Trainer::new(cfg.train.clone(), &kg).runtime()?;
    let outcome = trainer
        .run(|rec| write_record(&mut log, rec).map_err(|e| semkge::Error::Io {
            path: log_path.clone(),
            source: e,
        }))
        .runtime()?;
    if outcome.leaked_negatives > 0 {
        log::warn!("{} negatives were known positives (no admissible alternative)", outcome.leaked_negatives);
    }
    let ckpt_path = out.join(CHECKPOINT);
    save_checkpoint(&outcome.best, &ckpt_path).runtime()?;
    let best = outcome.best.history.last();
    match best.and_then(|r| r.val_mrr.map(|m| (r.epoch, m))) {
        Some((epoch, mrr)) => println!("best epoch {epoch}: validation MRR {mrr:.4}; checkpoint {}", ckpt_path.display()),
        None => println!("no validation split; kept epoch {}; checkpoint {}", outcome.best.epoch, ckpt_path.display()),
    }
    Ok(())
}

/// Appends one JSON line, flushed so a failed run leaves a readable partial log.
fn write_record(w: &mut BufWriter<File>, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, dump_ranks: bool) -> Outcome {
    let paths = cfg.dataset_paths().invalid()?;
    paths.check_exist().invalid()?;
    let opts = cfg.eval_options().invalid()?;
    let buckets = cfg.bucket_spec().invalid()?;
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT));
    if !ckpt_path.is_file() {
        return Err(Failure::Validation(anyhow!("checkpoint {} does not exist", ckpt_path.display())));
    }
    let ckpt = load_checkpoint(&ckpt_path).invalid()?;
    ckpt.expect_kind(cfg.train.model).invalid()?;
    let kg = load(&paths)?;
    ckpt.check_dataset(&kg).invalid()?;

    let index = SemIndex::build(&kg);
    let (report, results) = evaluate(&ckpt.params, &kg, &index, cfg.eval.split, &opts, buckets.as_ref()).runtime()?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    if dump_ranks {
        let path = out.join(RANKS);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display())).runtime()?);
        for r in &results {
            let line = serde_json::to_string(&RankLine::from(r)).runtime()?;
            writeln!(w, "{line}").runtime()?;
        }
        w.flush().runtime()?;
    }
    let m = &report.overall;
    let fmt = |map: &std::collections::BTreeMap<usize, f64>, name: &str| {
        map.iter().map(|(k, v)| format!("{name}@{k} {v:.4}")).collect::<Vec<_>>().join("  ")
    };
    println!(
        "{} {} ({} queries): MRR {:.4}  {}  {}",
        report.split,
        report.mode,
        report.num_queries,
        m.mrr,
        fmt(&m.hits, "Hits"),
        fmt(&m.sem, "Sem")
    );
    Ok(())
}

/// First 16 hex digits of the SHA-256 of the configuration's JSON form.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("configs serialise");
    hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
}

#[derive(Serialize)]
struct GridRow {
    rank: usize,
    config_hash: String,
    model: String,
    loss: String,
    variant: String,
    epsilon: f64,
    margin: f64,
    batch_size: usize,
    dim: usize,
    lr: f64,
    regularizer: String,
    reg_weight: f64,
    max_epochs: usize,
    seed: u64,
    val_mrr: Option<f64>,
    val_sem10: Option<f64>,
    best_epoch: Option<usize>,
    status: String,
}

impl GridRow {
    fn new(rank: usize, r: &GridResult) -> Self {
        let c = &r.config;
        let (val_mrr, val_sem10, best_epoch, status) = match &r.outcome {
            Ok(s) => (Some(s.val_mrr), Some(s.val_sem10), Some(s.epoch), "ok".to_string()),
            Err(msg) => (None, None, None, format!("failed: {msg}")),
        };
        GridRow {
            rank,
            config_hash: config_hash(c),
            model: c.model.to_string(),
            loss: c.loss.family.to_string(),
            variant: c.loss.variant.to_string(),
            epsilon: c.loss.epsilon,
            margin: c.loss.margin,
            batch_size: c.batch_size,
            dim: c.dim,
            lr: c.lr,
            regularizer: c.regularizer.to_string(),
            reg_weight: c.reg_weight,
            max_epochs: c.max_epochs,
            seed: c.seed,
            val_mrr,
            val_sem10,
            best_epoch,
            status,
        }
    }
}

pub fn grid(cfg: &RunConfig) -> Outcome {
    let Some(section) = &cfg.grid else {
        return Err(Failure::Validation(anyhow!("config has no [grid] section")));
    };
    let cells = section.cells(&cfg.train);
    if cells.is_empty() {
        return Err(Failure::Validation(anyhow!("grid is empty: every [grid] list must have at least one value")));
    }
    let paths = cfg.dataset_paths().invalid()?;
    paths.check_exist().invalid()?;
    let kg = load(&paths)?;
    if kg.valid().is_empty() {
        return Err(Failure::Validation(anyhow!("grid search needs a non-empty validation split")));
    }
    let out = &cfg.output.dir;
    create_dir(out)?;
    cfg.echo(out).runtime()?;
    let total = cells.len();
    let results = grid_search_with(&cells, &kg, |r| {
        let what = match &r.outcome {
            Ok(s) => format!("val MRR {:.4}, Sem@10 {:.4}", s.val_mrr, s.val_sem10),
            Err(msg) => format!("failed: {msg}"),
        };
        log::info!("cell {}/{total} [{}]: {what}", r.index + 1, config_hash(&r.config));
    })
    .runtime()?;

    let path = out.join(GRID_CSV);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot create {}", path.display()))
        .runtime()?;
    for (rank, r) in results.iter().enumerate() {
        w.serialize(GridRow::new(rank + 1, r)).runtime()?;
    }
    w.flush().runtime()?;
    let ok = results.iter().filter(|r| r.outcome.is_ok()).count();
    if ok == 0 {
        return Err(Failure::Runtime(anyhow!("all {total} grid cells failed; see {}", path.display())));
    }
    if let Some(best) = results.first().filter(|r| r.outcome.is_ok()) {
        println!(
            "{ok}/{total} cells succeeded; best [{}] val MRR {:.4}; results in {}",
            config_hash(&best.config),
            best.outcome.as_ref().map(|s| s.val_mrr).unwrap_or_default(),
            path.display()
        );
    }
    Ok(())
}
