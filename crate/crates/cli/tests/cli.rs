//! Runs the `semkge` binary end to end on small generated datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semkge::ingest::write_dataset;
use semkge::synth::typed_blocks;
use serde_json::Value;

fn semkge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semkge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Typed-blocks dataset in `data/` and a config with the given `[train]` body.
    fn new(train: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let kg = typed_blocks(&mut ChaCha8Rng::seed_from_u64(3), 10).unwrap();
        fs::create_dir(dir.path().join("data")).unwrap();
        write_dataset(&kg, &dir.path().join("data")).unwrap();
        let f = Fixture { dir };
        f.config("config.toml", train, "");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, train: &str, extra: &str) -> String {
        let text = format!("[data]\ndir = \"data\"\n\n[train]\n{train}\n\n[output]\ndir = \"out\"\n\n{extra}");
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn cfg(&self) -> String {
        self.path("config.toml").to_string_lossy().into_owned()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path("out").join(name)
    }
}

const SMALL: &str = "model = \"transe\"\ndim = 8\nmax_epochs = 3\neval_every = 1\nbatch_size = 256\nlr = 0.01\nseed = 4";

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&semkge(&["--help"])), 0);
    assert_eq!(code(&semkge(&["--version"])), 0);
    assert_eq!(code(&semkge(&["train", "--help"])), 0);
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&semkge(&[])), 1);
    assert_eq!(code(&semkge(&["fit"])), 1);
    let f = Fixture::new(SMALL);
    assert_eq!(code(&semkge(&["train", "-c", &f.cfg(), "--model", "TransX"])), 1);
    assert_eq!(code(&semkge(&["train", "-c", &f.path("nope.toml").to_string_lossy()])), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new(SMALL);
    let cfg = f.config("bad.toml", "learning_rate = 0.1", "");
    let o = semkge(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(!f.out("checkpoint.bin").exists());
}

#[test]
fn invalid_epsilon_names_the_constraint() {
    let f = Fixture::new(SMALL);
    let o = semkge(&["train", "-c", &f.cfg(), "--loss", "phl", "--variant", "S", "--epsilon", "1.5"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("0 < epsilon <= 1"), "{err}");
    let o = semkge(&["train", "-c", &f.cfg(), "--loss", "phl", "--variant", "S'"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_schema_file_fails_before_work() {
    let f = Fixture::new(SMALL);
    fs::remove_file(f.path("data").join("domains.tsv")).unwrap();
    for cmd in ["filter", "train", "stats"] {
        let o = semkge(&[cmd, "-c", &f.cfg()]);
        assert_eq!(code(&o), 1, "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("domains"), "{cmd}: {}", stderr(&o));
    }
    assert!(!f.path("out").exists());
}

#[test]
fn train_writes_outputs_and_echoes_the_loss() {
    let f = Fixture::new(SMALL);
    let args = ["train", "-c", &f.cfg(), "--loss", "phl", "--variant", "S", "--epsilon", "0.25", "--gamma", "2"];
    let o = semkge(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["config.toml", "checkpoint.bin", "train_log.jsonl"] {
        assert!(f.out(name).is_file(), "{name}");
    }
    let log = lines(&f.out("train_log.jsonl"));
    let loss = &log[0]["loss"];
    assert_eq!(loss["family"], "phl");
    assert_eq!(loss["variant"], "S");
    assert_eq!(loss["epsilon"], 0.25);
    assert_eq!(loss["margin"], 2.0);
    assert_eq!(&log[0]["config"]["loss"], loss);
    assert_eq!(log.len(), 4);
    assert_eq!(log[3]["epoch"], 3);
    assert!(log[1]["val_mrr"].is_f64());

    // the echoed config reproduces the run
    let first = fs::read(f.out("checkpoint.bin")).unwrap();
    let echo = f.out("config.toml").to_string_lossy().into_owned();
    let again = f.path("again");
    let o = semkge(&["train", "-c", &echo, "--out", &again.to_string_lossy()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(again.join("checkpoint.bin")).unwrap(), first);
}

#[test]
fn divergence_exits_two_and_keeps_the_log() {
    let f = Fixture::new(SMALL);
    let o = semkge(&["train", "-c", &f.cfg(), "--lr", "1e300"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let log = lines(&f.out("train_log.jsonl"));
    assert!(log[0].get("loss").is_some());
    assert!(!f.out("checkpoint.bin").exists());
}

#[test]
fn eval_report_matches_rank_dump() {
    let f = Fixture::new(SMALL);
    assert_eq!(code(&semkge(&["train", "-c", &f.cfg()])), 0);
    let o = semkge(&["eval", "-c", &f.cfg(), "--ks", "1,3,10", "--dump-ranks"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(f.out("eval_report.json")).unwrap()).unwrap();
    let overall = &report["overall"];
    assert_eq!(overall["hits"].as_object().unwrap().len(), 3);
    assert_eq!(overall["sem"].as_object().unwrap().len(), 3);
    assert_eq!(report["split"], "test");
    assert_eq!(report["mode"], "filtered");

    let ranks = lines(&f.out("ranks.jsonl"));
    assert_eq!(ranks.len() as u64, report["num_queries"].as_u64().unwrap());
    let n = ranks.len() as f64;
    let rank = |r: &Value| r["rank"].as_u64().unwrap();
    let mrr: f64 = ranks.iter().map(|r| 1.0 / rank(r) as f64).sum::<f64>() / n;
    assert!((mrr - overall["mrr"].as_f64().unwrap()).abs() < 1e-12);
    for k in [1u64, 3, 10] {
        let hits = ranks.iter().filter(|r| rank(r) <= k).count() as f64 / n;
        assert!((hits - overall["hits"][k.to_string()].as_f64().unwrap()).abs() < 1e-12, "Hits@{k}");
        let sem: f64 = ranks
            .iter()
            .map(|r| {
                let v = r["topk_valid"].as_array().unwrap();
                let m = (k as usize).min(v.len());
                v[..m].iter().map(|x| x.as_f64().unwrap()).sum::<f64>() / m as f64
            })
            .sum::<f64>()
            / n;
        assert!((sem - overall["sem"][k.to_string()].as_f64().unwrap()).abs() < 1e-12, "Sem@{k}");
    }
}

#[test]
fn eval_checks_checkpoint_against_config_and_data() {
    let f = Fixture::new(SMALL);
    let o = semkge(&["eval", "-c", &f.cfg()]);
    assert_eq!(code(&o), 1, "no checkpoint yet");
    assert_eq!(code(&semkge(&["train", "-c", &f.cfg()])), 0);
    let o = semkge(&["eval", "-c", &f.cfg(), "--model", "DistMult"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // a different dataset with fewer entities
    let other = Fixture::new(SMALL);
    fs::write(other.path("data").join("train.tsv"), "e0\tr0\te1\n").unwrap();
    let ckpt = f.out("checkpoint.bin").to_string_lossy().into_owned();
    let o = semkge(&["eval", "-c", &other.cfg(), "--checkpoint", &ckpt]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn eval_with_buckets_reports_each_bucket() {
    let f = Fixture::new(SMALL);
    assert_eq!(code(&semkge(&["train", "-c", &f.cfg()])), 0);
    let o = semkge(&["eval", "-c", &f.cfg(), "--buckets", "fb15k187", "--split", "valid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(f.out("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "valid");
    assert!(!report["by_bucket"].as_object().unwrap().is_empty());
    let o = semkge(&["eval", "-c", &f.cfg(), "--buckets", "no-such-spec"]);
    assert_eq!(code(&o), 1);
}

fn grid_rows(f: &Fixture) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(f.out("grid.csv")).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn grid_over_margins_gives_one_row_each() {
    let f = Fixture::new("model = \"transe\"\ndim = 4\nmax_epochs = 1\nbatch_size = 512\nseed = 1");
    let cfg = f.config("grid.toml", "model = \"transe\"\ndim = 4\nmax_epochs = 1\nbatch_size = 512\nseed = 1", "[grid]\nmargin = [1, 2, 3, 5, 10, 20]\n");
    let o = semkge(&["grid", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = grid_rows(&f);
    assert_eq!(rows.len(), 6);
    let headers = csv::Reader::from_path(f.out("grid.csv")).unwrap().headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut margins: Vec<f64> = rows.iter().map(|r| r[col("margin")].parse().unwrap()).collect();
    margins.sort_by(f64::total_cmp);
    assert_eq!(margins, [1.0, 2.0, 3.0, 5.0, 10.0, 20.0]);
    assert!(rows.iter().all(|r| &r[col("loss")] == "phl" && &r[col("status")] == "ok"));
    let mrr: Vec<f64> = rows.iter().map(|r| r[col("val_mrr")].parse().unwrap()).collect();
    assert!(mrr.windows(2).all(|w| w[0] >= w[1]));
    assert!(!rows[0][col("val_sem10")].is_empty());
    assert_eq!(rows[0][col("config_hash")].len(), 16);
}

#[test]
fn single_cell_and_empty_grids() {
    let f = Fixture::new(SMALL);
    let one = f.config("one.toml", "dim = 4\nmax_epochs = 1", "[grid]\nseed = [9]\n");
    assert_eq!(code(&semkge(&["grid", "-c", &one])), 0);
    assert_eq!(grid_rows(&f).len(), 1);

    let empty = f.config("empty.toml", "dim = 4", "[grid]\nlr = []\n");
    let o = semkge(&["grid", "-c", &empty]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    assert_eq!(code(&semkge(&["grid", "-c", &f.cfg()])), 1, "no [grid] section");
}

#[test]
fn failing_cells_are_recorded() {
    let f = Fixture::new(SMALL);
    let cfg = f.config("g.toml", "dim = 4\nmax_epochs = 1", "[grid]\nlr = [0.01, 1e300]\n");
    let o = semkge(&["grid", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = grid_rows(&f);
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][rows[0].len() - 1], "ok");
    assert!(rows[1][rows[1].len() - 1].starts_with("failed"));

    let all_bad = f.config("bad.toml", "dim = 4\nmax_epochs = 1", "[grid]\nlr = [1e300]\n");
    assert_eq!(code(&semkge(&["grid", "-c", &all_bad])), 2);
}

#[test]
fn filter_is_idempotent() {
    let f = Fixture::new(SMALL);
    // one ill-typed training triple: block-A entity as the tail of an A→B relation
    let train = f.path("data").join("train.tsv");
    let mut text = fs::read_to_string(&train).unwrap();
    let first = text.lines().next().unwrap().split('\t').next().unwrap().to_string();
    text.push_str(&format!("{first}\tr0\t{first}\n"));
    fs::write(&train, text).unwrap();

    let o = semkge(&["filter", "-c", &f.cfg()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: Value = serde_json::from_str(&fs::read_to_string(f.out("stats.json")).unwrap()).unwrap();
    assert_eq!(
        stats["before"]["train"].as_u64().unwrap(),
        stats["after"]["train"].as_u64().unwrap() + 1
    );

    let echo = f.out("config.toml").to_string_lossy().into_owned();
    let twice = f.path("twice");
    let o = semkge(&["filter", "-c", &echo, "--out", &twice.to_string_lossy()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["train.tsv", "valid.tsv", "test.tsv", "entity_types.tsv", "domains.tsv", "ranges.tsv"] {
        assert_eq!(fs::read(f.out(name)).unwrap(), fs::read(twice.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn filter_that_empties_training_fails() {
    let f = Fixture::new(SMALL);
    let data = f.path("data");
    fs::write(data.join("train.tsv"), "x\tr0\ty\n").unwrap();
    fs::write(data.join("valid.tsv"), "").unwrap();
    fs::write(data.join("test.tsv"), "").unwrap();
    let o = semkge(&["filter", "-c", &f.cfg()]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("training"), "{}", stderr(&o));
}

#[test]
fn stats_from_dir_or_config() {
    let f = Fixture::new(SMALL);
    let o = semkge(&["stats", "--data", &f.path("data").to_string_lossy(), "--name", "blocks"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("blocks") && table.contains("200"), "{table}");
    let out = f.path("s");
    let o = semkge(&["stats", "-c", &f.cfg(), "--out", &out.to_string_lossy()]);
    assert_eq!(code(&o), 0);
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(s["entities"], 200);
    assert_eq!(s["relations"], 4);
    assert_eq!(code(&semkge(&["stats"])), 1);
}

#[test]
fn flags_override_file_values() {
    let f = Fixture::new(SMALL);
    let o = semkge(&["train", "-c", &f.cfg(), "--model", "DistMult", "--dim", "6", "--epochs", "1", "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: toml::Value = toml::from_str(&fs::read_to_string(f.out("config.toml")).unwrap()).unwrap();
    let t = &echo["train"];
    assert_eq!(t["model"].as_str(), Some("distmult"));
    assert_eq!(t["dim"].as_integer(), Some(6));
    assert_eq!(t["max_epochs"].as_integer(), Some(1));
    assert_eq!(t["seed"].as_integer(), Some(11));
    assert_eq!(t["lr"].as_float(), Some(0.01));
    assert!(Path::new(echo["data"]["dir"].as_str().unwrap()).is_absolute());
}
