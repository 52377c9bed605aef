//! Link-prediction ranking, MRR / Hits@K / Sem@K, and relation-bucket breakdowns.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, SemIndex, Side, Split, Triple};
use crate::models::{score_all, ModelParams};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Raw,
    #[default]
    Filtered,
}

impl RankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RankMode::Raw => "raw",
            RankMode::Filtered => "filtered",
        }
    }
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(RankMode::Raw),
            "filtered" => Ok(RankMode::Filtered),
            _ => Err(Error::config(format!("unknown ranking mode {s:?} (expected raw or filtered)"))),
        }
    }
}

/// How equal scores count against the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    /// `1 + #{score > s}`.
    #[default]
    Optimistic,
    /// `1 + #{score >= s}` over the other candidates.
    Pessimistic,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimistic" => Ok(TieBreak::Optimistic),
            "pessimistic" => Ok(TieBreak::Pessimistic),
            _ => Err(Error::config(format!("unknown tie policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: RankMode,
    pub ties: TieBreak,
    /// Cut-offs for Hits@K and Sem@K; sorted and deduplicated by `normalized`.
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: RankMode::Filtered,
            ties: TieBreak::Optimistic,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl EvalOptions {
    pub fn normalized(mut self) -> Result<Self> {
        self.ks.sort_unstable();
        self.ks.dedup();
        if self.ks.is_empty() || self.ks[0] == 0 {
            return Err(Error::config("K list must be non-empty and positive"));
        }
        Ok(self)
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }
}

/// Outcome of one link-prediction query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub triple: Triple,
    pub side: Side,
    pub rank: usize,
    /// Best-scored admissible candidates, score descending then id ascending.
    pub topk: Vec<EntityId>,
    pub topk_valid: Vec<bool>,
}

/// Ranks `scores[target]` among the admissible candidates.
/// `excluded[e]` removes `e` from the candidate list; the target is never excluded.
pub fn rank_of(scores: &[f64], target: usize, excluded: &[bool], ties: TieBreak) -> usize {
    let s = scores[target];
    let admissible = |e: usize| e != target && !excluded.get(e).copied().unwrap_or(false);
    if s.is_nan() {
        // a NaN truth sits below every candidate
        return 1 + (0..scores.len()).filter(|&e| admissible(e)).count();
    }
    let beats = |x: f64| match ties {
        TieBreak::Optimistic => x > s,
        TieBreak::Pessimistic => x >= s,
    };
    1 + (0..scores.len()).filter(|&e| admissible(e) && beats(scores[e])).count()
}

/// Score-descending, id-ascending order; NaN sorts last.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => y.partial_cmp(&x).unwrap().then(a.cmp(&b)),
        }
    }
}

/// The `k` best admissible entities.
pub fn top_k(scores: &[f64], excluded: &[bool], k: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..scores.len())
        .filter(|&e| !excluded.get(e).copied().unwrap_or(false))
        .collect();
    let cmp = by_score_desc(scores);
    if k < cands.len() {
        cands.select_nth_unstable_by(k, &cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(&cmp);
    cands
}

/// Ranks the ground-truth `side` entity of `t` against every completion.
pub fn rank_query(
    params: &ModelParams,
    kg: &KnowledgeGraph,
    index: &SemIndex,
    t: &Triple,
    side: Side,
    opts: &EvalOptions,
) -> Result<RankResult> {
    let fixed = t.entity(side.other());
    let target = t.entity(side).index();
    let scores = score_all(params, t.rel, fixed, side)?;
    let mut excluded = vec![false; scores.len()];
    if opts.mode == RankMode::Filtered {
        for e in kg.known_completions(t, side) {
            excluded[e.index()] = true;
        }
        excluded[target] = false;
    }
    let rank = rank_of(&scores, target, &excluded, opts.ties);
    let mask = index.mask(t.rel, side);
    let topk: Vec<EntityId> = top_k(&scores, &excluded, opts.max_k())
        .into_iter()
        .map(EntityId::from)
        .collect();
    let topk_valid = topk.iter().map(|e| mask[e.index()]).collect();
    Ok(RankResult {
        triple: *t,
        side,
        rank,
        topk,
        topk_valid,
    })
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn mean_of(results: &[&RankResult], f: impl Fn(&RankResult) -> f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("no queries to average over".into()));
    }
    let mut acc = CompensatedSum::default();
    for r in results {
        acc.add(f(r));
    }
    Ok(acc.value() / results.len() as f64)
}

pub fn mrr(results: &[&RankResult]) -> Result<f64> {
    mean_of(results, |r| 1.0 / r.rank as f64)
}

pub fn hits_at_k(results: &[&RankResult], k: usize) -> Result<f64> {
    mean_of(results, |r| if r.rank <= k { 1.0 } else { 0.0 })
}

/// Mean over queries of the valid fraction of the first `k` listed candidates.
/// The denominator is the list length, `min(k, #candidates)`.
pub fn sem_at_k(results: &[&RankResult], k: usize) -> Result<f64> {
    mean_of(results, |r| {
        let n = k.min(r.topk_valid.len());
        if n == 0 {
            return 0.0;
        }
        r.topk_valid[..n].iter().filter(|&&v| v).count() as f64 / n as f64
    })
}

/// MRR, Hits@K and Sem@K over one group of queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    pub sem: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

impl Metrics {
    pub fn compute(results: &[&RankResult], ks: &[usize]) -> Result<Metrics> {
        let mut hits = BTreeMap::new();
        let mut sem = BTreeMap::new();
        for &k in ks {
            hits.insert(k, hits_at_k(results, k)?);
            sem.insert(k, sem_at_k(results, k)?);
        }
        Ok(Metrics {
            mrr: mrr(results)?,
            hits,
            sem,
            num_queries: results.len(),
        })
    }

    fn compute_opt(results: &[&RankResult], ks: &[usize]) -> Result<Option<Metrics>> {
        if results.is_empty() {
            Ok(None)
        } else {
            Metrics::compute(results, ks).map(Some)
        }
    }
}

pub const BUCKET_NAMES: [&str; 3] = ["B1", "B2", "B3"];
pub const UNBUCKETED: &str = "unbucketed";

/// Closed intervals of candidate-set sizes per bucket and side.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideIntervals {
    #[serde(default)]
    pub head: Vec<[usize; 2]>,
    #[serde(default)]
    pub tail: Vec<[usize; 2]>,
}

impl SideIntervals {
    pub fn get(&self, side: Side) -> &[[usize; 2]] {
        match side {
            Side::Head => &self.head,
            Side::Tail => &self.tail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BucketSpec {
    pub buckets: BTreeMap<String, SideIntervals>,
}

pub const FB15K187_BUCKETS: &str = include_str!("../data/buckets/fb15k187.json");
pub const DBPEDIA77K_BUCKETS: &str = include_str!("../data/buckets/dbpedia77k.json");
pub const YAGO14K_BUCKETS: &str = include_str!("../data/buckets/yago14k.json");

impl BucketSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: BucketSpec =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid bucket spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// One of the bundled cut-off tables: `fb15k187`, `dbpedia77k` or `yago14k`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fb15k187" => Self::from_json(FB15K187_BUCKETS),
            "dbpedia77k" => Self::from_json(DBPEDIA77K_BUCKETS),
            "yago14k" => Self::from_json(YAGO14K_BUCKETS),
            _ => Err(Error::config(format!("no bundled bucket spec named {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.buckets.keys() {
            if name == UNBUCKETED {
                return Err(Error::config(format!("bucket name {UNBUCKETED:?} is reserved")));
            }
        }
        for side in Side::BOTH {
            let mut all: Vec<(usize, usize, &str)> = Vec::new();
            for (name, iv) in &self.buckets {
                for &[lo, hi] in iv.get(side) {
                    if lo > hi {
                        return Err(Error::config(format!("bucket {name} {side} interval [{lo}, {hi}] is empty")));
                    }
                    all.push((lo, hi, name));
                }
            }
            all.sort_unstable();
            for w in all.windows(2) {
                if w[1].0 <= w[0].1 {
                    return Err(Error::config(format!(
                        "{side} intervals [{}, {}] ({}) and [{}, {}] ({}) overlap",
                        w[0].0, w[0].1, w[0].2, w[1].0, w[1].1, w[1].2
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bucket holding a candidate-set size, if any.
    pub fn bucket_of(&self, side: Side, size: usize) -> Option<&str> {
        self.buckets
            .iter()
            .find(|(_, iv)| iv.get(side).iter().any(|&[lo, hi]| lo <= size && size <= hi))
            .map(|(name, _)| name.as_str())
    }
}

/// Bucket name of every `(relation, side)`, by the size of its semantically valid candidate set.
pub fn bucket_assign(index: &SemIndex, num_relations: usize, spec: &BucketSpec) -> Result<BTreeMap<(RelationId, Side), String>> {
    spec.validate()?;
    let mut out = BTreeMap::new();
    for r in 0..num_relations {
        let r = RelationId::from(r);
        for side in Side::BOTH {
            let size = index.candidates(r, side).len();
            let name = spec.bucket_of(side, size).unwrap_or(UNBUCKETED);
            out.insert((r, side), name.to_string());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BySide {
    pub head: Option<Metrics>,
    pub tail: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub mode: RankMode,
    pub overall: Metrics,
    pub by_side: BySide,
    /// Present only when a bucket spec was given; buckets without queries are null.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub by_bucket: Option<BTreeMap<String, Option<Metrics>>>,
    pub num_queries: usize,
}

/// Every query of a split, head queries and tail queries interleaved per triple.
pub fn rank_split(
    params: &ModelParams,
    kg: &KnowledgeGraph,
    index: &SemIndex,
    triples: &[Triple],
    opts: &EvalOptions,
) -> Result<Vec<RankResult>> {
    let queries: Vec<(Triple, Side)> = triples
        .iter()
        .flat_map(|t| Side::BOTH.into_iter().map(move |s| (*t, s)))
        .collect();
    queries
        .par_iter()
        .map(|(t, side)| rank_query(params, kg, index, t, *side, opts))
        .collect()
}

/// Aggregates ranked queries into a report.
pub fn report(
    results: &[RankResult],
    split: Split,
    index: &SemIndex,
    num_relations: usize,
    opts: &EvalOptions,
    buckets: Option<&BucketSpec>,
) -> Result<EvalReport> {
    let all: Vec<&RankResult> = results.iter().collect();
    if all.is_empty() {
        return Err(Error::UndefinedMetric(format!("the {split} split has no triples")));
    }
    let overall = Metrics::compute(&all, &opts.ks)?;
    let side_of = |s: Side| -> Vec<&RankResult> { results.iter().filter(|r| r.side == s).collect() };
    let by_side = BySide {
        head: Metrics::compute_opt(&side_of(Side::Head), &opts.ks)?,
        tail: Metrics::compute_opt(&side_of(Side::Tail), &opts.ks)?,
    };
    let by_bucket = match buckets {
        None => None,
        Some(spec) => {
            let assign = bucket_assign(index, num_relations, spec)?;
            let mut names: Vec<String> = BUCKET_NAMES.iter().map(|s| s.to_string()).collect();
            names.extend(spec.buckets.keys().filter(|k| !BUCKET_NAMES.contains(&k.as_str())).cloned());
            names.push(UNBUCKETED.to_string());
            let mut map = BTreeMap::new();
            for name in names {
                let group: Vec<&RankResult> = results
                    .iter()
                    .filter(|r| assign[&(r.triple.rel, r.side)] == name)
                    .collect();
                map.insert(name, Metrics::compute_opt(&group, &opts.ks)?);
            }
            Some(map)
        }
    };
    Ok(EvalReport {
        split,
        mode: opts.mode,
        overall,
        by_side,
        by_bucket,
        num_queries: all.len(),
    })
}

/// Ranks both sides of every triple of `split` and aggregates the results.
pub fn evaluate(
    params: &ModelParams,
    kg: &KnowledgeGraph,
    index: &SemIndex,
    split: Split,
    opts: &EvalOptions,
    buckets: Option<&BucketSpec>,
) -> Result<(EvalReport, Vec<RankResult>)> {
    check_compatible(params, kg)?;
    let results = rank_split(params, kg, index, kg.split(split), opts)?;
    let rep = report(&results, split, index, kg.num_relations(), opts, buckets)?;
    Ok((rep, results))
}

pub(crate) fn check_compatible(params: &ModelParams, kg: &KnowledgeGraph) -> Result<()> {
    if params.num_entities() != kg.num_entities() || params.num_relations() != kg.num_relations() {
        return Err(Error::Checkpoint(format!(
            "model has {} entities and {} relations but the dataset has {} and {}",
            params.num_entities(),
            params.num_relations(),
            kg.num_entities(),
            kg.num_relations()
        )));
    }
    Ok(())
}

/// One line of the raw-results dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankLine {
    pub h: u32,
    pub r: u32,
    pub t: u32,
    pub side: Side,
    pub rank: usize,
    pub topk: Vec<u32>,
    pub topk_valid: Vec<u8>,
}

impl From<&RankResult> for RankLine {
    fn from(r: &RankResult) -> Self {
        RankLine {
            h: r.triple.head.0,
            r: r.triple.rel.0,
            t: r.triple.tail.0,
            side: r.side,
            rank: r.rank,
            topk: r.topk.iter().map(|e| e.0).collect(),
            topk_valid: r.topk_valid.iter().map(|&v| v as u8).collect(),
        }
    }
}

impl From<&RankLine> for RankResult {
    fn from(l: &RankLine) -> Self {
        RankResult {
            triple: Triple::new(l.h, l.r, l.t),
            side: l.side,
            rank: l.rank,
            topk: l.topk.iter().map(|&e| EntityId(e)).collect(),
            topk_valid: l.topk_valid.iter().map(|&b| b != 0).collect(),
        }
    }
}
