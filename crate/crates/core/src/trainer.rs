//! Training loop: shuffled batches, paired negatives or 1-N rows, regularisation,
//! sparse Adam updates, periodic validation and best-checkpoint retention.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Regularizer, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, check_compatible, EvalOptions};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, SemIndex, Side, Split, Triple};
use crate::losses::{bcel, bcel_targets, phl, pll, FlipContext, LossFamily};
use crate::models::{score_all, GradBuffer, ModelKind, ModelParams, Table};
use crate::sampler::{epoch_negatives, EpochNegatives};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_KEY: u64 = 0x05af_f1e5_0000_0000;
// positives whose 1-N rows are held in memory at once
const BCEL_CHUNK: usize = 64;

/// Adam with per-row lazy updates: only rows with a gradient this step move,
/// while bias correction follows the global step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    step: u64,
    m: Vec<Table>,
    v: Vec<Table>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tables().iter().map(|t| Table::zeros(t.rows(), t.dim())).collect();
        Adam {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_parts(step: u64, m: Vec<Table>, v: Vec<Table>) -> Self {
        Adam { step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Table] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Table] {
        &self.v
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        let same = |ts: &[Table]| {
            ts.len() == params.tables().len()
                && ts
                    .iter()
                    .zip(params.tables())
                    .all(|(a, b)| a.rows() == b.rows() && a.dim() == b.dim())
        };
        same(&self.m) && same(&self.v)
    }

    /// Applies one step to every row touched in `grads`.
    pub fn update(&mut self, params: &mut ModelParams, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for slot in 0..grads.tables().len() {
            for &row in grads.touched_rows(slot) {
                let g = grads.tables()[slot].row(row);
                let m = self.m[slot].row_mut(row);
                let v = self.v[slot].row_mut(row);
                let p = params.tables_mut()[slot].row_mut(row);
                for k in 0..g.len() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                    p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Adds the penalty of the touched rows into `grads` and returns its value.
/// L2 is `λ Σ x²`, L1 is `λ Σ |x|`.
pub fn regularize(params: &ModelParams, grads: &mut GradBuffer, reg: Regularizer, weight: f64) -> f64 {
    if reg == Regularizer::None || weight == 0.0 {
        return 0.0;
    }
    let mut value = 0.0;
    for slot in 0..params.tables().len() {
        let rows = grads.touched_rows(slot).to_vec();
        for row in rows {
            let x = params.tables()[slot].row(row);
            let g = grads.row_mut(slot, row);
            for (gk, &xk) in g.iter_mut().zip(x) {
                match reg {
                    Regularizer::L2 => {
                        value += xk * xk;
                        *gk += 2.0 * weight * xk;
                    }
                    Regularizer::L1 => {
                        value += xk.abs();
                        if xk != 0.0 {
                            *gk += weight * xk.signum();
                        }
                    }
                    Regularizer::None => unreachable!(),
                }
            }
        }
    }
    weight * value
}

/// One entry of the training log, written at each validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Summed batch losses (regularisation included) over the number of training triples.
    pub train_loss: f64,
    pub val_mrr: Option<f64>,
    pub val_hits10: Option<f64>,
    pub val_sem10: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation MRR, or the final one when nothing was validated.
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Negatives that fell back to a known positive over the whole run.
    pub leaked_negatives: usize,
}

type CompletionIndex = HashMap<(EntityId, RelationId, Side), Vec<EntityId>>;

pub struct Trainer<'a> {
    cfg: TrainConfig,
    kg: &'a KnowledgeGraph,
    index: SemIndex,
    train_known: CompletionIndex,
    params: ModelParams,
    adam: Adam,
    grads: GradBuffer,
    epoch: usize,
    history: Vec<LogRecord>,
    best: Option<(f64, Checkpoint)>,
    leaked: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, kg: &'a KnowledgeGraph) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.model, kg.num_entities(), kg.num_relations(), cfg.dim, cfg.seed)?;
        Self::with_params(cfg, kg, params)
    }

    /// Starts from given parameters with fresh optimizer state.
    pub fn with_params(cfg: TrainConfig, kg: &'a KnowledgeGraph, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&params, kg)?;
        if params.kind() != cfg.model || params.dim() != cfg.dim {
            return Err(Error::config(format!(
                "parameters are {} with d = {}, config asks for {} with d = {}",
                params.kind(),
                params.dim(),
                cfg.model,
                cfg.dim
            )));
        }
        let adam = Adam::new(&params);
        let grads = GradBuffer::zeros_like(&params);
        let mut train_known: CompletionIndex = HashMap::new();
        for t in kg.train() {
            for side in Side::BOTH {
                train_known
                    .entry((t.entity(side.other()), t.rel, side))
                    .or_default()
                    .push(t.entity(side));
            }
        }
        Ok(Trainer {
            cfg,
            kg,
            index: SemIndex::build(kg),
            train_known,
            params,
            adam,
            grads,
            epoch: 0,
            history: Vec::new(),
            best: None,
            leaked: 0,
        })
    }

    /// Continues from a snapshot; later training matches an uninterrupted run bit for bit.
    pub fn resume(ckpt: Checkpoint, kg: &'a KnowledgeGraph) -> Result<Self> {
        let mut tr = Self::with_params(ckpt.config.clone(), kg, ckpt.params.clone())?;
        if let Some(adam) = &ckpt.optimizer {
            if !adam.matches(&tr.params) {
                return Err(Error::Checkpoint("optimizer state does not match the parameter shapes".into()));
            }
            tr.adam = adam.clone();
        }
        tr.epoch = ckpt.epoch;
        tr.history = ckpt.history.clone();
        let at_snapshot = ckpt
            .history
            .last()
            .filter(|r| r.epoch == ckpt.epoch)
            .and_then(|r| r.val_mrr);
        let best_before = ckpt.history.iter().filter_map(|r| r.val_mrr).fold(f64::NEG_INFINITY, f64::max);
        if let Some(m) = at_snapshot {
            if m >= best_before {
                tr.best = Some((m, ckpt));
            }
        }
        Ok(tr)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn index(&self) -> &SemIndex {
        &self.index
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn leaked_negatives(&self) -> usize {
        self.leaked
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            history: self.history.clone(),
        }
    }

    /// Permutation of the training triples for epoch `epoch` (0-based).
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.kg.train().len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ SHUFFLE_KEY);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Paired negatives of every training triple for epoch `epoch` (0-based).
    /// They depend on the master seed only, not on the model.
    pub fn negatives(&self, epoch: usize) -> Result<EpochNegatives> {
        epoch_negatives(self.kg, &self.index, epoch, self.cfg.seed)
    }

    /// Runs one epoch and returns its mean loss per training triple.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let e = self.epoch;
        let n = self.kg.train().len();
        let order = self.epoch_order(e);
        let negatives = match self.cfg.loss.family {
            LossFamily::Bcel => None,
            _ => {
                let negs = self.negatives(e)?;
                self.leaked += negs.leaked;
                Some(negs.pairs)
            }
        };
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let pos: Vec<Triple> = chunk.iter().map(|&i| self.kg.train()[i]).collect();
            let neg: Vec<Triple> = match &negatives {
                Some(pairs) => chunk
                    .iter()
                    .flat_map(|&i| [pairs[i].valid.triple, pairs[i].invalid.triple])
                    .collect(),
                None => Vec::new(),
            };
            total += self.step(e, b, &pos, &neg)?;
        }
        self.epoch += 1;
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    /// One optimisation step. For PHL and PLL `neg` holds two negatives per positive,
    /// valid first; BCEL ignores it and scores every completion of both sides.
    pub fn step(&mut self, epoch: usize, batch: usize, pos: &[Triple], neg: &[Triple]) -> Result<f64> {
        let (loss, _) = self.loss_and_grad(epoch, batch, pos, neg)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                batch,
                msg: format!("loss is {loss}"),
            });
        }
        self.adam.update(&mut self.params, &self.grads, self.cfg.lr);
        // a zero rate leaves every row, normals included, exactly as it was
        if self.cfg.lr != 0.0 && self.params.kind() == ModelKind::TransH {
            self.params.normalize_normals(self.grads.touched_rows(2).to_vec());
        }
        let finite = (0..self.grads.tables().len()).all(|slot| {
            self.grads
                .touched_rows(slot)
                .iter()
                .all(|&row| self.params.tables()[slot].row(row).iter().all(|x| x.is_finite()))
        });
        if !finite {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                batch,
                msg: "parameters became non-finite".into(),
            });
        }
        Ok(loss)
    }

    /// Batch loss, regularisation included, and its gradient over the touched rows.
    /// Parameters are left unchanged.
    pub fn loss_and_grad(&mut self, epoch: usize, batch: usize, pos: &[Triple], neg: &[Triple]) -> Result<(f64, &GradBuffer)> {
        self.grads.clear();
        let spec = self.cfg.loss;
        let flips = FlipContext::new(spec.seed, epoch, batch);
        let params = &self.params;
        let score = |ts: &[Triple]| -> Vec<f64> { ts.par_iter().map(|t| params.score_one(t)).collect() };
        let mut weighted: Vec<(Triple, f64)> = Vec::new();
        let data_loss = match spec.family {
            LossFamily::Phl | LossFamily::Pll => {
                let validity: Vec<bool> = neg.iter().map(|t| self.index.is_valid(t)).collect();
                let pos_s = score(pos);
                let neg_s = score(neg);
                if spec.family == LossFamily::Phl {
                    let out = phl(&spec, &pos_s, &neg_s, &validity)?;
                    weighted.extend(pos.iter().copied().zip(out.pos_grad));
                    weighted.extend(neg.iter().copied().zip(out.neg_grad));
                    out.value
                } else {
                    let mut scores = pos_s;
                    scores.extend(neg_s);
                    let mut labels = vec![1.0; pos.len()];
                    labels.resize(pos.len() + neg.len(), -1.0);
                    let mut val = vec![false; pos.len()];
                    val.extend(validity);
                    let out = pll(&spec, &scores, &labels, &val, &flips)?;
                    let all = pos.iter().chain(neg).copied();
                    weighted.extend(all.zip(out.grad));
                    out.value
                }
            }
            LossFamily::Bcel => {
                // rows are built in parallel a chunk at a time to bound memory
                let mut value = 0.0;
                for (c, chunk) in pos.chunks(BCEL_CHUNK).enumerate() {
                    for (v, w) in self.bcel_rows(chunk, c * BCEL_CHUNK, &flips)? {
                        value += v;
                        for (t, g) in w {
                            self.params.touch(&t, &mut self.grads);
                            self.params.accumulate_grad(&t, g, &mut self.grads);
                        }
                    }
                }
                value
            }
        };
        for (t, w) in &weighted {
            self.params.touch(t, &mut self.grads);
            self.params.accumulate_grad(t, *w, &mut self.grads);
        }
        let reg_loss = regularize(&self.params, &mut self.grads, self.cfg.regularizer, self.cfg.reg_weight);
        Ok((data_loss + reg_loss, &self.grads))
    }

    /// Loss value and per-completion score weights of the head and tail 1-N rows of each
    /// positive; `first` is the batch position of `pos[0]`.
    #[allow(clippy::type_complexity)]
    fn bcel_rows(&self, pos: &[Triple], first: usize, flips: &FlipContext) -> Result<Vec<(f64, Vec<(Triple, f64)>)>> {
        let n = self.kg.num_entities();
        let spec = &self.cfg.loss;
        let rows: Vec<(usize, Side)> = (0..pos.len())
            .flat_map(|j| Side::BOTH.into_iter().map(move |s| (j, s)))
            .collect();
        rows.par_iter()
            .map(|&(j, side)| {
                let t = &pos[j];
                let fixed = t.entity(side.other());
                let scores = score_all(&self.params, t.rel, fixed, side)?;
                let mut positive = vec![false; n];
                if let Some(known) = self.train_known.get(&(fixed, t.rel, side)) {
                    for e in known {
                        positive[e.index()] = true;
                    }
                }
                let fixed_ok = self.index.is_candidate(t.rel, side.other(), fixed);
                let validity: Vec<bool> = self.index.mask(t.rel, side).iter().map(|&m| m && fixed_ok).collect();
                let draw_offset = ((2 * (first + j) + side as usize) * n) as u64;
                let targets = bcel_targets(spec, &positive, &validity, flips, draw_offset)?;
                let loss = bcel(spec, &scores, &targets)?;
                let weights = loss
                    .grad
                    .iter()
                    .enumerate()
                    .map(|(e, &g)| (t.with_entity(side, EntityId::from(e)), g))
                    .collect();
                Ok((loss.value, weights))
            })
            .collect()
    }

    /// Filtered validation MRR, Hits@10 and Sem@10, or `None` without validation triples.
    pub fn validate_now(&self) -> Result<Option<(f64, f64, f64)>> {
        if self.kg.valid().is_empty() {
            return Ok(None);
        }
        let opts = EvalOptions::default();
        let (rep, _) = eval::evaluate(&self.params, self.kg, &self.index, Split::Valid, &opts, None)?;
        Ok(Some((rep.overall.mrr, rep.overall.hits[&10], rep.overall.sem[&10])))
    }

    /// Trains up to `max_epochs`, validating every `eval_every` epochs and on the last one.
    /// `on_record` sees each log record as soon as it exists.
    pub fn run(mut self, mut on_record: impl FnMut(&LogRecord) -> Result<()>) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.max_epochs {
            let train_loss = self.train_epoch()?;
            let ep = self.epoch;
            if !ep.is_multiple_of(self.cfg.eval_every) && ep != self.cfg.max_epochs {
                continue;
            }
            let val = self.validate_now()?;
            let rec = LogRecord {
                epoch: ep,
                train_loss,
                val_mrr: val.map(|v| v.0),
                val_hits10: val.map(|v| v.1),
                val_sem10: val.map(|v| v.2),
            };
            log::info!(
                "epoch {ep}: loss {train_loss:.6}{}",
                val.map(|v| format!(", val MRR {:.4}, Hits@10 {:.4}, Sem@10 {:.4}", v.0, v.1, v.2))
                    .unwrap_or_default()
            );
            self.history.push(rec.clone());
            on_record(&rec)?;
            if let Some(m) = rec.val_mrr {
                if self.best.as_ref().is_none_or(|(b, _)| m > *b) {
                    self.best = Some((m, self.snapshot()));
                }
            }
        }
        let last = self.snapshot();
        let best = match self.best.take() {
            Some((_, c)) => c,
            None => last.clone(),
        };
        Ok(TrainOutcome {
            best,
            last,
            leaked_negatives: self.leaked,
        })
    }
}

/// Trains `cfg` on `kg` and returns the best-validation checkpoint.
pub fn train(cfg: &TrainConfig, kg: &KnowledgeGraph) -> Result<Checkpoint> {
    Ok(Trainer::new(cfg.clone(), kg)?.run(|_| Ok(()))?.best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub val_mrr: f64,
    pub val_sem10: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Position in the input grid.
    pub index: usize,
    pub config: TrainConfig,
    pub outcome: std::result::Result<GridScore, String>,
}

/// Best validation record of a finished run.
pub fn best_record(history: &[LogRecord]) -> Option<GridScore> {
    let mut best: Option<GridScore> = None;
    for r in history {
        if let (Some(m), Some(s)) = (r.val_mrr, r.val_sem10) {
            if best.as_ref().is_none_or(|b| m > b.val_mrr) {
                best = Some(GridScore {
                    val_mrr: m,
                    val_sem10: s,
                    epoch: r.epoch,
                });
            }
        }
    }
    best
}

/// Trains every configuration and ranks them by validation MRR, best first; ties keep
/// grid order and failed cells follow the successful ones.
pub fn grid_search(grid: &[TrainConfig], kg: &KnowledgeGraph) -> Result<Vec<GridResult>> {
    grid_search_with(grid, kg, |_| {})
}

/// As [`grid_search`], reporting each cell as it finishes.
pub fn grid_search_with(
    grid: &[TrainConfig],
    kg: &KnowledgeGraph,
    mut on_cell: impl FnMut(&GridResult),
) -> Result<Vec<GridResult>> {
    if grid.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    if kg.valid().is_empty() {
        return Err(Error::config("grid search needs validation triples"));
    }
    let mut results = Vec::with_capacity(grid.len());
    for (index, cfg) in grid.iter().enumerate() {
        let outcome = train(cfg, kg).map_err(|e| e.to_string()).and_then(|ckpt| {
            best_record(&ckpt.history).ok_or_else(|| "no validation record".to_string())
        });
        if let Err(msg) = &outcome {
            log::warn!("grid cell {index} failed: {msg}");
        }
        let res = GridResult {
            index,
            config: cfg.clone(),
            outcome,
        };
        on_cell(&res);
        results.push(res);
    }
    results.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y.val_mrr.total_cmp(&x.val_mrr).then(a.index.cmp(&b.index)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.index.cmp(&b.index),
    });
    Ok(results)
}
