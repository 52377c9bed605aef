//! Pairwise hinge (PHL), 1-N binary cross-entropy (BCEL) and pointwise logistic (PLL) losses,
//! each in a vanilla form and in forms that treat semantically valid negatives differently.
//!
//! | family | S                                             | S′                                  |
//! |--------|-----------------------------------------------|-------------------------------------|
//! | PHL    | margin `γ·ε` for valid negatives, `γ` else    | not defined                         |
//! | BCEL   | label `ε` for valid negatives                 | valid negatives relabelled 1 w.p. ε |
//! | PLL    | valid negatives relabelled +1 w.p. ε          | label `ε` (instead of −1)           |
//!
//! Every loss returns its value together with `∂loss/∂score` for each input score, which the
//! trainer feeds to the models' gradient routines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{is_sem_valid, Schema, Triple};

/// Bounds applied to `σ(f)` before taking logarithms in BCEL.
pub const SIGMOID_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Phl,
    Bcel,
    Pll,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Phl => "phl",
            LossFamily::Bcel => "bcel",
            LossFamily::Pll => "pll",
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phl" => Ok(LossFamily::Phl),
            "bcel" => Ok(LossFamily::Bcel),
            "pll" => Ok(LossFamily::Pll),
            _ => Err(Error::config(format!("unknown loss {s:?} (expected phl, bcel or pll)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S'")]
    SPrime,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::S => "S",
            Variant::SPrime => "S'",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "V" | "v" => Ok(Variant::Vanilla),
            "S" | "s" => Ok(Variant::S),
            "S'" | "s'" | "sprime" | "SPrime" | "s_prime" => Ok(Variant::SPrime),
            _ => Err(Error::config(format!("unknown loss variant {s:?} (expected vanilla, S or S')"))),
        }
    }
}

/// Loss family, variant and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub family: LossFamily,
    pub variant: Variant,
    /// Hinge margin γ (PHL only).
    pub margin: f64,
    /// Semantic factor ε (S and S′ only).
    pub epsilon: f64,
    /// Seed of the stochastic relabelling draws.
    pub seed: u64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::vanilla(LossFamily::Phl)
    }
}

impl LossSpec {
    pub fn vanilla(family: LossFamily) -> Self {
        LossSpec {
            family,
            variant: Variant::Vanilla,
            margin: 1.0,
            epsilon: 0.0,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: Variant, epsilon: f64) -> Self {
        self.variant = variant;
        self.epsilon = epsilon;
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    /// Checks the hyperparameter ranges of the chosen family and variant.
    pub fn validate(&self) -> Result<()> {
        let eps = self.epsilon;
        if self.family == LossFamily::Phl && !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!("PHL margin must be > 0, got {}", self.margin)));
        }
        let ok = match (self.family, self.variant) {
            (_, Variant::Vanilla) => true,
            (LossFamily::Phl, Variant::S) => eps > 0.0 && eps <= 1.0,
            (LossFamily::Phl, Variant::SPrime) => {
                return Err(Error::config("PHL has no S' variant"));
            }
            (LossFamily::Bcel, Variant::S) => (0.0..1.0).contains(&eps),
            (LossFamily::Bcel, Variant::SPrime) => (0.0..=1.0).contains(&eps),
            (LossFamily::Pll, Variant::S) => (0.0..=1.0).contains(&eps),
            (LossFamily::Pll, Variant::SPrime) => (-1.0..=1.0).contains(&eps),
        };
        if !ok {
            let constraint = match (self.family, self.variant) {
                (LossFamily::Phl, _) => "0 < epsilon <= 1",
                (LossFamily::Bcel, Variant::S) => "0 <= epsilon < 1",
                (LossFamily::Pll, Variant::SPrime) => "-1 <= epsilon <= 1",
                _ => "0 <= epsilon <= 1",
            };
            return Err(Error::config(format!(
                "{}-{} requires {constraint}, got epsilon = {eps}",
                self.family, self.variant
            )));
        }
        Ok(())
    }
}

/// Counter-based source of relabelling draws: the draw at `index` for a given
/// `(seed, epoch, batch)` is fixed regardless of how many other draws were made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlipContext {
    pub seed: u64,
    pub epoch: u32,
    pub batch: u32,
}

impl FlipContext {
    pub fn new(seed: u64, epoch: usize, batch: usize) -> Self {
        FlipContext {
            seed,
            epoch: epoch as u32,
            batch: batch as u32,
        }
    }

    fn rng_at(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_f11b_0000_0000);
        rng.set_stream(((self.epoch as u64) << 32) | self.batch as u64);
        rng.set_word_pos(2 * index as u128);
        rng
    }

    /// Uniform draw in `[0, 1)` at `index`.
    pub fn uniform(&self, index: u64) -> f64 {
        self.rng_at(index).gen()
    }

    /// `n` consecutive draws starting at `start`; equal to `uniform(start + i)` for each `i`.
    pub fn uniforms(&self, start: u64, n: usize) -> impl Iterator<Item = f64> {
        let mut rng = self.rng_at(start);
        (0..n).map(move |_| {
            // gen::<f64>() takes the top 53 bits of one u64
            (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `∂value/∂score_i`.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseOutput {
    pub value: f64,
    pub pos_grad: Vec<f64>,
    pub neg_grad: Vec<f64>,
}

/// Pairwise hinge loss `Σ [γ·ℓ(t′) + f(t′) − f(t)]₊`.
///
/// Negatives are grouped per positive: `neg[i*k .. (i+1)*k]` belong to `pos[i]`.
/// `ℓ(t′) = 1` for vanilla; for S it is `ε` on valid negatives and `1` on invalid ones.
pub fn phl(spec: &LossSpec, pos: &[f64], neg: &[f64], validity: &[bool]) -> Result<PairwiseOutput> {
    if spec.family != LossFamily::Phl {
        return Err(Error::usage(format!("phl called with a {} spec", spec.family)));
    }
    if pos.is_empty() {
        if !neg.is_empty() {
            return Err(Error::usage("negatives given without positives"));
        }
        return Ok(PairwiseOutput {
            value: 0.0,
            pos_grad: Vec::new(),
            neg_grad: Vec::new(),
        });
    }
    if !neg.len().is_multiple_of(pos.len()) || neg.is_empty() {
        return Err(Error::usage(format!(
            "{} negatives cannot be split evenly over {} positives",
            neg.len(),
            pos.len()
        )));
    }
    if validity.len() != neg.len() {
        return Err(Error::usage(format!(
            "{} validity flags for {} negatives",
            validity.len(),
            neg.len()
        )));
    }
    let k = neg.len() / pos.len();
    let mut value = 0.0;
    let mut pos_grad = vec![0.0; pos.len()];
    let mut neg_grad = vec![0.0; neg.len()];
    for (j, (&fn_, &valid)) in neg.iter().zip(validity).enumerate() {
        let i = j / k;
        let label = match spec.variant {
            Variant::S if valid => spec.epsilon,
            _ => 1.0,
        };
        let term = spec.margin * label + fn_ - pos[i];
        if term > 0.0 {
            value += term;
            neg_grad[j] = 1.0;
            pos_grad[i] -= 1.0;
        }
    }
    Ok(PairwiseOutput {
        value,
        pos_grad,
        neg_grad,
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Targets of one 1-N row. `positive[e]` marks known true completions and `validity[e]`
/// the semantic validity of the completed triple. For BCEL-S′ the draws come from
/// `flips.uniforms(draw_offset, n)`.
pub fn bcel_targets(
    spec: &LossSpec,
    positive: &[bool],
    validity: &[bool],
    flips: &FlipContext,
    draw_offset: u64,
) -> Result<Vec<f64>> {
    if positive.len() != validity.len() {
        return Err(Error::usage("positive and validity masks differ in length"));
    }
    let base = positive.iter().zip(validity);
    Ok(match spec.variant {
        Variant::Vanilla => positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        Variant::S => base
            .map(|(&p, &v)| match (p, v) {
                (true, _) => 1.0,
                (false, true) => spec.epsilon,
                (false, false) => 0.0,
            })
            .collect(),
        Variant::SPrime => base
            .zip(flips.uniforms(draw_offset, positive.len()))
            .map(|((&p, &v), u)| if p || (v && u < spec.epsilon) { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// 1-N binary cross-entropy over one query row:
/// `−(1/n) Σ_e ℓ(e)·log σ(f_e) + (1−ℓ(e))·log(1−σ(f_e))`, with `σ` clamped to `[1e-7, 1−1e-7]`.
pub fn bcel(spec: &LossSpec, scores: &[f64], targets: &[f64]) -> Result<LossOutput> {
    if spec.family != LossFamily::Bcel {
        return Err(Error::usage(format!("bcel called with a {} spec", spec.family)));
    }
    if scores.len() != targets.len() {
        return Err(Error::usage(format!(
            "{} scores but {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::usage(format!("BCEL label {bad} outside [0, 1]")));
    }
    if scores.is_empty() {
        return Ok(LossOutput {
            value: 0.0,
            grad: Vec::new(),
        });
    }
    let n = scores.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&f, &l) in scores.iter().zip(targets) {
        let s = sigmoid(f);
        let p = s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
        sum += l * p.ln() + (1.0 - l) * (1.0 - p).ln();
        let inside = s > SIGMOID_CLAMP && s < 1.0 - SIGMOID_CLAMP;
        grad.push(if inside { (s - l) / n } else { 0.0 });
    }
    Ok(LossOutput { value: -sum / n, grad })
}

/// Effective PLL labels after applying the variant's relabelling.
pub fn pll_labels(spec: &LossSpec, labels: &[f64], validity: &[bool], flips: &FlipContext) -> Result<Vec<f64>> {
    if labels.len() != validity.len() {
        return Err(Error::usage(format!(
            "{} labels but {} validity flags",
            labels.len(),
            validity.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::usage(format!("PLL label {bad} not in {{-1, +1}}")));
    }
    Ok(match spec.variant {
        Variant::Vanilla => labels.to_vec(),
        Variant::S => labels
            .iter()
            .zip(validity)
            .zip(flips.uniforms(0, labels.len()))
            .map(|((&l, &v), u)| if l < 0.0 && v && u < spec.epsilon { 1.0 } else { l })
            .collect(),
        Variant::SPrime => labels
            .iter()
            .zip(validity)
            .map(|(&l, &v)| if l < 0.0 && v { spec.epsilon } else { l })
            .collect(),
    })
}

/// Pointwise logistic loss `Σ log(1 + exp(−ℓ(t)·f(t)))` with variant relabelling of
/// semantically valid negatives (labels −1).
pub fn pll(spec: &LossSpec, scores: &[f64], labels: &[f64], validity: &[bool], flips: &FlipContext) -> Result<LossOutput> {
    if spec.family != LossFamily::Pll {
        return Err(Error::usage(format!("pll called with a {} spec", spec.family)));
    }
    if scores.len() != labels.len() {
        return Err(Error::usage(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let labels = pll_labels(spec, labels, validity, flips)?;
    Ok(pll_with_labels(scores, &labels))
}

/// PLL on already-resolved labels.
pub fn pll_with_labels(scores: &[f64], labels: &[f64]) -> LossOutput {
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&f, &l)| {
            value += softplus(-l * f);
            -l * sigmoid(-l * f)
        })
        .collect();
    LossOutput { value, grad }
}

/// Semantic validity of each triple of a batch.
pub fn classify_negatives(batch: &[Triple], schema: &Schema) -> Result<Vec<bool>> {
    batch.iter().map(|t| is_sem_valid(t, schema)).collect()
}
