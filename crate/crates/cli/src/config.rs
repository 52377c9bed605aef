//! Run configuration file: sections, path resolution and the effective-config echo.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use semkge::eval::{RankMode, TieBreak, DEFAULT_KS};
use semkge::ingest::DatasetPaths;
use semkge::losses::{LossFamily, Variant};
use semkge::models::ModelKind;
use semkge::{BucketSpec, EvalOptions, Regularizer, Split, TrainConfig};

/// File name of the effective configuration written next to every output.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

/// Dataset location: `dir` supplies the standard file names, individual keys override them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_types: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub mode: RankMode,
    pub ties: TieBreak,
    pub ks: Vec<usize>,
    /// Built-in bucket spec name (`fb15k187`, `dbpedia77k`, `yago14k`) or a JSON file path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buckets: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            mode: RankMode::Filtered,
            ties: TieBreak::Optimistic,
            ks: DEFAULT_KS.to_vec(),
            buckets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

/// Value lists swept by `grid`; the cells are their Cartesian product over `[train]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Vec<ModelKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<Vec<LossFamily>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Vec<Variant>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<Vec<Regularizer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_weight: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
}

/// Cartesian product of `values` applied through `set`, expanding every cell of `cells`.
fn expand<T: Clone>(cells: Vec<TrainConfig>, values: &Option<Vec<T>>, set: impl Fn(&mut TrainConfig, T)) -> Vec<TrainConfig> {
    let Some(values) = values else { return cells };
    let set = &set;
    cells
        .into_iter()
        .flat_map(|c| {
            values.iter().map(move |v| {
                let mut c = c.clone();
                set(&mut c, v.clone());
                c
            })
        })
        .collect::<Vec<_>>()
}

impl GridSection {
    /// Grid cells in row-major order over the keys in declaration order (`model` slowest, `seed` fastest).
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut cells = vec![base.clone()];
        cells = expand(cells, &self.model, |c, v| c.model = v);
        cells = expand(cells, &self.loss, |c, v| c.loss.family = v);
        cells = expand(cells, &self.variant, |c, v| c.loss.variant = v);
        cells = expand(cells, &self.epsilon, |c, v| c.loss.epsilon = v);
        cells = expand(cells, &self.margin, |c, v| c.loss.margin = v);
        cells = expand(cells, &self.batch_size, |c, v| c.batch_size = v);
        cells = expand(cells, &self.dim, |c, v| c.dim = v);
        cells = expand(cells, &self.lr, |c, v| c.lr = v);
        cells = expand(cells, &self.regularizer, |c, v| c.regularizer = v);
        cells = expand(cells, &self.reg_weight, |c, v| c.reg_weight = v);
        cells = expand(cells, &self.seed, |c, v| c.seed = v);
        cells
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside it are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.dir,
            &mut d.train,
            &mut d.valid,
            &mut d.test,
            &mut d.entity_types,
            &mut d.domains,
            &mut d.ranges,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
        self.output.dir = resolve(base, &self.output.dir);
        if let Some(b) = &self.eval.buckets {
            if BucketSpec::builtin(b).is_err() {
                self.eval.buckets = Some(resolve(base, Path::new(b)).to_string_lossy().into_owned());
            }
        }
    }

    pub fn dataset_paths(&self) -> Result<DatasetPaths> {
        let d = &self.data;
        let from_dir = d.dir.as_deref().map(DatasetPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, name: &str, get: fn(&DatasetPaths) -> &PathBuf| -> Result<PathBuf> {
            match (explicit, &from_dir) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(paths)) => Ok(get(paths).clone()),
                (None, None) => bail!("[data] needs `dir` or an explicit `{name}` path"),
            }
        };
        Ok(DatasetPaths {
            train: pick(&d.train, "train", |p| &p.train)?,
            valid: pick(&d.valid, "valid", |p| &p.valid)?,
            test: pick(&d.test, "test", |p| &p.test)?,
            entity_types: pick(&d.entity_types, "entity_types", |p| &p.entity_types)?,
            domains: pick(&d.domains, "domains", |p| &p.domains)?,
            ranges: pick(&d.ranges, "ranges", |p| &p.ranges)?,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            mode: self.eval.mode,
            ties: self.eval.ties,
            ks: self.eval.ks.clone(),
        }
        .normalized()?)
    }

    pub fn bucket_spec(&self) -> Result<Option<BucketSpec>> {
        let Some(name) = &self.eval.buckets else { return Ok(None) };
        if let Ok(spec) = BucketSpec::builtin(name) {
            return Ok(Some(spec));
        }
        let text = fs::read_to_string(name).with_context(|| format!("cannot read bucket spec {name}"))?;
        Ok(Some(BucketSpec::from_json(&text)?))
    }

    /// Every check that can run before loading data: paths, hyperparameters, eval options.
    pub fn validate(&self) -> Result<()> {
        self.dataset_paths()?.check_exist()?;
        self.train.validate()?;
        self.eval_options()?;
        self.bucket_spec()?;
        if self.train.seed > i64::MAX as u64 {
            bail!("seed must be at most {}", i64::MAX);
        }
        Ok(())
    }

    /// Writes the effective configuration with absolute paths to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let mut abs = self.clone();
        let cwd = std::env::current_dir()?;
        abs.rebase(&cwd);
        let text = toml::to_string_pretty(&abs).context("cannot serialise config")?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[extra]\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train.loss]\nfamily = \"phl\"\ngamma = 2\n").is_err());
    }

    #[test]
    fn sections_default() {
        let cfg: RunConfig = toml::from_str("[data]\ndir = \"d\"\n[train]\ndim = 8\n").unwrap();
        assert_eq!(cfg.train.dim, 8);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.eval, EvalSection::default());
        assert!(cfg.grid.is_none());
    }

    #[test]
    fn explicit_paths_override_dir() {
        let cfg: RunConfig = toml::from_str("[data]\ndir = \"/d\"\ntest = \"/x/t.tsv\"\n").unwrap();
        let p = cfg.dataset_paths().unwrap();
        assert_eq!(p.train, PathBuf::from("/d/train.tsv"));
        assert_eq!(p.test, PathBuf::from("/x/t.tsv"));
        let empty = RunConfig::default();
        assert!(empty.dataset_paths().is_err());
    }

    #[test]
    fn grid_is_row_major_product() {
        let g: GridSection = toml::from_str("lr = [0.1, 0.01]\ndim = [4, 8, 16]\n").unwrap();
        let cells = g.cells(&TrainConfig::default());
        assert_eq!(cells.len(), 6);
        assert_eq!((cells[0].dim, cells[0].lr), (4, 0.1));
        assert_eq!((cells[1].dim, cells[1].lr), (4, 0.01));
        assert_eq!((cells[5].dim, cells[5].lr), (16, 0.01));
        let empty: GridSection = toml::from_str("lr = []\n").unwrap();
        assert!(empty.cells(&TrainConfig::default()).is_empty());
    }

    #[test]
    fn shipped_example_parses() {
        let cfg: RunConfig = toml::from_str(include_str!("../../../configs/example.toml")).unwrap();
        cfg.train.validate().unwrap();
        cfg.eval_options().unwrap();
        assert_eq!(cfg.grid.unwrap().cells(&cfg.train).len(), 12);
    }

    #[test]
    fn toml_roundtrip() {
        let text = "[data]\ndir = \"/d\"\n[train]\nseed = 7\n[train.loss]\nfamily = \"pll\"\nvariant = \"S'\"\nepsilon = -0.1\n\
                    [eval]\nmode = \"raw\"\nbuckets = \"fb15k187\"\n[grid]\nmargin = [1.0, 2.0]\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let back: RunConfig = toml::from_str(&toml::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.loss.variant, Variant::SPrime);
    }
}
