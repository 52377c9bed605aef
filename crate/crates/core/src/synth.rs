//! Synthetic knowledge graphs for tests, demos and sanity checks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::kg::{ClassId, EntityId, KnowledgeGraph, Labels, RelationId, Schema, Triple, Vocab};

/// Shape of a random schema'd graph.
#[derive(Clone, Debug)]
pub struct RandomKgShape {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    /// Chance that an entity carries no class at all.
    pub p_untyped: f64,
    /// Chance that a relation declares its domain (and, independently, its range).
    pub p_declared: f64,
}

impl Default for RandomKgShape {
    fn default() -> Self {
        RandomKgShape {
            num_entities: 30,
            num_relations: 3,
            num_classes: 3,
            num_train: 60,
            num_valid: 10,
            num_test: 10,
            p_untyped: 0.1,
            p_declared: 0.8,
        }
    }
}

fn random_classes<R: Rng + ?Sized>(rng: &mut R, num_classes: usize) -> Vec<ClassId> {
    let k = rng.gen_range(1..=num_classes.min(2));
    let mut all: Vec<u32> = (0..num_classes as u32).collect();
    all.shuffle(rng);
    all.truncate(k);
    all.into_iter().map(ClassId).collect()
}

/// Random schema, typing and disjoint splits. Split sizes are upper bounds: distinct
/// triples are drawn with a bounded number of attempts.
pub fn random_kg<R: Rng + ?Sized>(rng: &mut R, shape: &RandomKgShape) -> Result<KnowledgeGraph> {
    let (ne, nr, nc) = (shape.num_entities, shape.num_relations, shape.num_classes);
    let mut schema = Schema::new(ne, nr, nc);
    if nc > 0 {
        for e in 0..ne {
            if !rng.gen_bool(shape.p_untyped) {
                for c in random_classes(rng, nc) {
                    schema.add_entity_class(EntityId::from(e), c)?;
                }
            }
        }
        for r in 0..nr {
            let r = RelationId::from(r);
            if rng.gen_bool(shape.p_declared) {
                for c in random_classes(rng, nc) {
                    schema.declare_domain(r, c)?;
                }
            }
            if rng.gen_bool(shape.p_declared) {
                for c in random_classes(rng, nc) {
                    schema.declare_range(r, c)?;
                }
            }
        }
    }
    let total = shape.num_train + shape.num_valid + shape.num_test;
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(total);
    let mut attempts = 0;
    while triples.len() < total && attempts < 50 * total.max(1) && ne > 0 && nr > 0 {
        attempts += 1;
        let t = Triple::new(rng.gen_range(0..ne), rng.gen_range(0..nr), rng.gen_range(0..ne));
        if seen.insert(t) {
            triples.push(t);
        }
    }
    let n_train = shape.num_train.min(triples.len());
    let n_valid = shape.num_valid.min(triples.len() - n_train);
    let test = triples.split_off(n_train + n_valid);
    let valid = triples.split_off(n_train);
    KnowledgeGraph::new(Vocab::numbered(ne, nr, nc), triples, valid, test, schema)
}

/// Entities per block and tails per head in [`typed_blocks`].
pub const BLOCK_SIZE: usize = 100;
const TAILS_PER_HEAD: usize = 5;

/// Two disjoint entity types `A` (ids `0..100`) and `B` (ids `100..200`) and four typed
/// relations: `r0: A→B`, `r1: B→A`, `r2: A→A`, `r3: B→B`. Every head links to five
/// random tails of the right block, giving 2,000 triples of which `held_out` per
/// relation go to each of valid and test.
pub fn typed_blocks<R: Rng + ?Sized>(rng: &mut R, held_out: usize) -> Result<KnowledgeGraph> {
    let n = 2 * BLOCK_SIZE;
    let mut entities = Labels::new();
    for e in 0..n {
        let prefix = if e < BLOCK_SIZE { "a" } else { "b" };
        entities.intern(&format!("{prefix}{}", e % BLOCK_SIZE));
    }
    let mut relations = Labels::new();
    for name in ["a_to_b", "b_to_a", "a_to_a", "b_to_b"] {
        relations.intern(name);
    }
    let mut classes = Labels::new();
    classes.intern("A");
    classes.intern("B");
    let mut schema = Schema::new(n, 4, 2);
    for e in 0..n {
        schema.add_entity_class(EntityId::from(e), ClassId((e / BLOCK_SIZE) as u32))?;
    }
    let blocks = [(0u32, 1u32), (1, 0), (0, 0), (1, 1)];
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (r, &(dom, rng_class)) in blocks.iter().enumerate() {
        let r = RelationId::from(r);
        schema.declare_domain(r, ClassId(dom))?;
        schema.declare_range(r, ClassId(rng_class))?;
        let mut rel_triples = Vec::new();
        for h in 0..BLOCK_SIZE {
            let head = dom as usize * BLOCK_SIZE + h;
            let mut tails: Vec<usize> = (0..BLOCK_SIZE).map(|t| rng_class as usize * BLOCK_SIZE + t).collect();
            tails.retain(|&t| t != head);
            tails.shuffle(rng);
            for &t in &tails[..TAILS_PER_HEAD] {
                rel_triples.push(Triple::new(head, r, t));
            }
        }
        rel_triples.shuffle(rng);
        // held-out triples keep both entities seen in training
        let mut seen_heads = HashSet::new();
        let mut seen_tails = HashSet::new();
        let mut kept = Vec::new();
        let mut spare = Vec::new();
        for t in rel_triples {
            if seen_heads.contains(&t.head) && seen_tails.contains(&t.tail) && spare.len() < 2 * held_out {
                spare.push(t);
            } else {
                seen_heads.insert(t.head);
                seen_tails.insert(t.tail);
                kept.push(t);
            }
        }
        let split = spare.len() / 2;
        test.extend(spare.split_off(split));
        valid.extend(spare);
        train.extend(kept);
    }
    let vocab = Vocab {
        entities,
        relations,
        classes,
    };
    KnowledgeGraph::new(vocab, train, valid, test, schema)
}
