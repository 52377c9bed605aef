//! Negative generation: uniform corruption and paired valid/invalid sampling.
//!
//! Each train triple is paired with one semantically valid and one semantically invalid
//! negative. The pair for triple `i` at epoch `k` depends only on `(master_seed, k, i)`,
//! so every model trained with the same seed sees the same negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, SemIndex, Side, Triple};

/// Rejection attempts before falling back to explicit enumeration (or accepting a known positive).
pub const MAX_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Negative {
    pub triple: Triple,
    pub side: Side,
    /// The negative is a known true triple (bounded-retry escape hatch).
    pub leaked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct NegativePair {
    pub valid: Negative,
    pub invalid: Negative,
}

/// Replaces `side` of `t` with an entity drawn uniformly among all others, rejecting known
/// positives up to [`MAX_RETRIES`] times.
pub fn corrupt_uniform<R: Rng + ?Sized>(t: &Triple, side: Side, kg: &KnowledgeGraph, rng: &mut R) -> Result<Negative> {
    let n = kg.num_entities();
    if n < 2 {
        return Err(Error::usage("uniform corruption needs at least two entities"));
    }
    let truth = t.entity(side).index();
    let draw = |rng: &mut R| {
        let mut x = rng.gen_range(0..n - 1);
        if x >= truth {
            x += 1;
        }
        t.with_entity(side, EntityId::from(x))
    };
    for _ in 0..MAX_RETRIES {
        let cand = draw(rng);
        if !kg.is_true(&cand) {
            return Ok(Negative {
                triple: cand,
                side,
                leaked: false,
            });
        }
    }
    let cand = draw(rng);
    let leaked = kg.is_true(&cand);
    if leaked {
        log::warn!(
            "accepting known positive ({}, {}, {}) as negative after {MAX_RETRIES} retries",
            cand.head,
            cand.rel,
            cand.tail
        );
    }
    Ok(Negative {
        triple: cand,
        side,
        leaked,
    })
}

#[derive(Clone, Copy)]
enum Pool<'a> {
    All(usize),
    Listed(&'a [EntityId]),
}

impl Pool<'_> {
    fn len(&self) -> usize {
        match self {
            Pool::All(n) => *n,
            Pool::Listed(v) => v.len(),
        }
    }

    fn get(&self, i: usize) -> EntityId {
        match self {
            Pool::All(_) => EntityId::from(i),
            Pool::Listed(v) => v[i],
        }
    }
}

/// Uniform draw from `pool` minus the ground truth minus known positives:
/// rejection first, then exact enumeration. `None` when nothing admissible is left.
fn draw_admissible<R: Rng + ?Sized>(
    t: &Triple,
    side: Side,
    pool: Pool<'_>,
    kg: &KnowledgeGraph,
    rng: &mut R,
) -> Option<Negative> {
    let truth = t.entity(side);
    let len = pool.len();
    if len == 0 {
        return None;
    }
    let admissible = |e: EntityId| e != truth && !kg.is_true(&t.with_entity(side, e));
    for _ in 0..MAX_RETRIES {
        let e = pool.get(rng.gen_range(0..len));
        if admissible(e) {
            return Some(Negative {
                triple: t.with_entity(side, e),
                side,
                leaked: false,
            });
        }
    }
    let rest: Vec<EntityId> = (0..len).map(|i| pool.get(i)).filter(|&e| admissible(e)).collect();
    if rest.is_empty() {
        return None;
    }
    let e = rest[rng.gen_range(0..rest.len())];
    Some(Negative {
        triple: t.with_entity(side, e),
        side,
        leaked: false,
    })
}

/// Any entity of `pool` other than the truth, accepted even if it forms a known positive.
fn draw_leaked<R: Rng + ?Sized>(t: &Triple, side: Side, pool: Pool<'_>, rng: &mut R) -> Option<Negative> {
    let truth = t.entity(side);
    let rest: Vec<EntityId> = (0..pool.len()).map(|i| pool.get(i)).filter(|&e| e != truth).collect();
    if rest.is_empty() {
        return None;
    }
    let e = rest[rng.gen_range(0..rest.len())];
    log::warn!(
        "accepting known positive ({}, {}, {}) as negative: no other admissible entity",
        t.head,
        t.rel,
        t.tail
    );
    Some(Negative {
        triple: t.with_entity(side, e),
        side,
        leaked: true,
    })
}

fn valid_pool<'a>(t: &Triple, side: Side, index: &'a SemIndex) -> Pool<'a> {
    // The untouched side must already be admissible for any corruption to be valid.
    if index.is_candidate(t.rel, side.other(), t.entity(side.other())) {
        Pool::Listed(index.candidates(t.rel, side))
    } else {
        Pool::Listed(&[])
    }
}

fn invalid_pool<'a>(t: &Triple, side: Side, index: &'a SemIndex) -> Pool<'a> {
    if index.is_candidate(t.rel, side.other(), t.entity(side.other())) {
        Pool::Listed(index.non_candidates(t.rel, side))
    } else {
        Pool::All(index.num_entities())
    }
}

fn draw_with_fallback<'a, R: Rng + ?Sized>(
    t: &Triple,
    kg: &KnowledgeGraph,
    index: &'a SemIndex,
    rng: &mut R,
    pool_for: impl Fn(&Triple, Side, &'a SemIndex) -> Pool<'a>,
    what: &str,
) -> Result<Negative> {
    let first = if rng.gen::<bool>() { Side::Head } else { Side::Tail };
    let sides = [first, first.other()];
    for side in sides {
        if let Some(neg) = draw_admissible(t, side, pool_for(t, side, index), kg, rng) {
            return Ok(neg);
        }
    }
    for side in sides {
        if let Some(neg) = draw_leaked(t, side, pool_for(t, side, index), rng) {
            return Ok(neg);
        }
    }
    Err(Error::Sampling(format!(
        "no semantically {what} corruption exists for ({}, {}, {})",
        t.head, t.rel, t.tail
    )))
}

/// One semantically valid and one semantically invalid corruption of `t`, each on a side
/// chosen uniformly; a side with no admissible entity falls back to the other side.
pub fn sample_pair<R: Rng + ?Sized>(t: &Triple, kg: &KnowledgeGraph, index: &SemIndex, rng: &mut R) -> Result<NegativePair> {
    let valid = draw_with_fallback(t, kg, index, rng, valid_pool, "valid")?;
    let invalid = draw_with_fallback(t, kg, index, rng, invalid_pool, "invalid")?;
    Ok(NegativePair { valid, invalid })
}

/// Generator owning the draws for train triple `triple_index` at `epoch`.
pub fn pair_rng(master_seed: u64, epoch: usize, triple_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((epoch as u64) << 40) | triple_index as u64);
    rng
}

/// Negative pair for train triple `i` at `epoch`; a pure function of its arguments.
pub fn pair_for(kg: &KnowledgeGraph, index: &SemIndex, master_seed: u64, epoch: usize, i: usize) -> Result<NegativePair> {
    let t = kg
        .train()
        .get(i)
        .ok_or_else(|| Error::usage(format!("train index {i} out of range")))?;
    sample_pair(t, kg, index, &mut pair_rng(master_seed, epoch, i))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochNegatives {
    /// `pairs[i]` belongs to `kg.train()[i]`.
    pub pairs: Vec<NegativePair>,
    /// Negatives that are known positives (escape hatch).
    pub leaked: usize,
}

/// Negative pairs for every train triple at `epoch`, computed in parallel.
pub fn epoch_negatives(kg: &KnowledgeGraph, index: &SemIndex, epoch: usize, master_seed: u64) -> Result<EpochNegatives> {
    let pairs = (0..kg.train().len())
        .into_par_iter()
        .map(|i| pair_for(kg, index, master_seed, epoch, i))
        .collect::<Result<Vec<_>>>()?;
    let leaked = pairs
        .iter()
        .map(|p| usize::from(p.valid.leaked) + usize::from(p.invalid.leaked))
        .sum();
    if leaked > 0 {
        log::warn!("epoch {epoch}: {leaked} negatives are known positives");
    }
    Ok(EpochNegatives { pairs, leaked })
}
