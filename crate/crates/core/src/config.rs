//! Training configuration and the hyperparameter search space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossFamily, LossSpec};
use crate::models::ModelKind;

/// Default epoch cap.
pub const DEFAULT_MAX_EPOCHS: usize = 400;

/// Values explored by grid search for each hyperparameter.
pub mod search_space {
    pub const BATCH_SIZES: [usize; 5] = [128, 256, 512, 1024, 2048];
    pub const DIMS: [usize; 4] = [50, 100, 150, 200];
    pub const REG_WEIGHTS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
    pub const LEARNING_RATES: [f64; 5] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4];
    pub const MARGINS: [f64; 6] = [1.0, 2.0, 3.0, 5.0, 10.0, 20.0];
    pub const EPSILON_PHL_S: [f64; 5] = [0.01, 0.1, 0.25, 0.5, 0.75];
    pub const EPSILON_PLL_S: [f64; 4] = [0.05, 0.10, 0.15, 0.25];
    pub const EPSILON_BCEL_S: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    L1,
    L2,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::None => "none",
            Regularizer::L1 => "l1",
            Regularizer::L2 => "l2",
        })
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Regularizer::None),
            "l1" => Ok(Regularizer::L1),
            "l2" => Ok(Regularizer::L2),
            _ => Err(Error::config(format!("unknown regularizer {s:?}"))),
        }
    }
}

/// Missing fields take their [`Default`] values when deserialising.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub loss: LossSpec,
    pub batch_size: usize,
    pub dim: usize,
    pub lr: f64,
    pub regularizer: Regularizer,
    pub reg_weight: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Validation cadence in epochs; the final epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::TransE,
            loss: LossSpec::vanilla(LossFamily::Phl),
            batch_size: 1024,
            dim: 100,
            lr: 1e-3,
            regularizer: Regularizer::L2,
            reg_weight: 1e-3,
            max_epochs: DEFAULT_MAX_EPOCHS,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be a finite value >= 0, got {}", self.lr)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config(format!("reg_weight must be >= 0, got {}", self.reg_weight)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        Ok(())
    }

    /// Names of hyperparameters lying outside the grid-search ranges.
    pub fn outside_search_space(&self) -> Vec<&'static str> {
        use search_space::*;
        let mut out = Vec::new();
        if !BATCH_SIZES.contains(&self.batch_size) {
            out.push("batch_size");
        }
        if !DIMS.contains(&self.dim) {
            out.push("dim");
        }
        if !LEARNING_RATES.contains(&self.lr) {
            out.push("lr");
        }
        if self.regularizer != Regularizer::None && !REG_WEIGHTS.contains(&self.reg_weight) {
            out.push("reg_weight");
        }
        if self.loss.family == LossFamily::Phl && !MARGINS.contains(&self.loss.margin) {
            out.push("margin");
        }
        out
    }
}
