//! Identifier spaces, triples, the domain/range schema and the knowledge graph container.
//!
//! A triple `(h, r, t)` is *semantically valid* when `type(h) ∩ domain(r) ≠ ∅` and
//! `type(t) ∩ range(r) ≠ ∅`. A relation without a declared domain (or range) places
//! no constraint on that side. Entities with no type fail every declared constraint.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            #[inline]
            fn from(i: usize) -> Self {
                $name(i as u32)
            }
        }

        impl From<u32> for $name {
            #[inline]
            fn from(i: u32) -> Self {
                $name(i)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

dense_id!(
    /// Index into the entity vocabulary.
    EntityId
);
dense_id!(
    /// Index into the relation vocabulary.
    RelationId
);
dense_id!(
    /// Index into the class vocabulary.
    ClassId
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: impl Into<EntityId>, rel: impl Into<RelationId>, tail: impl Into<EntityId>) -> Self {
        Triple {
            head: head.into(),
            rel: rel.into(),
            tail: tail.into(),
        }
    }

    /// The entity sitting on `side`.
    #[inline]
    pub fn entity(&self, side: Side) -> EntityId {
        match side {
            Side::Head => self.head,
            Side::Tail => self.tail,
        }
    }

    /// Copy of this triple with `side` replaced by `e`.
    #[inline]
    pub fn with_entity(&self, side: Side, e: EntityId) -> Triple {
        match side {
            Side::Head => Triple { head: e, ..*self },
            Side::Tail => Triple { tail: e, ..*self },
        }
    }
}

impl From<(u32, u32, u32)> for Triple {
    fn from((h, r, t): (u32, u32, u32)) -> Self {
        Triple {
            head: EntityId(h),
            rel: RelationId(r),
            tail: EntityId(t),
        }
    }
}

/// Which slot of a triple is predicted or corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Head, Side::Tail];

    pub fn other(self) -> Side {
        match self {
            Side::Head => Side::Tail,
            Side::Tail => Side::Head,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Insertion-ordered label ↔ id map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Labels {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Labels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Labels `prefix0, prefix1, ...`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        let mut labels = Labels::new();
        for i in 0..n {
            labels.intern(&format!("{prefix}{i}"));
        }
        labels
    }

    /// Id of `name`, assigning the next free id on first appearance.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Entity, relation and class vocabularies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    pub entities: Labels,
    pub relations: Labels,
    pub classes: Labels,
}

impl Vocab {
    pub fn numbered(num_entities: usize, num_relations: usize, num_classes: usize) -> Self {
        Vocab {
            entities: Labels::numbered("e", num_entities),
            relations: Labels::numbered("r", num_relations),
            classes: Labels::numbered("c", num_classes),
        }
    }
}

/// Entity types plus relation domains and ranges. Class sets are kept sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    num_classes: usize,
    entity_classes: Vec<Vec<ClassId>>,
    rel_domain: Vec<Option<Vec<ClassId>>>,
    rel_range: Vec<Option<Vec<ClassId>>>,
}

fn insert_sorted(set: &mut Vec<ClassId>, c: ClassId) {
    if let Err(pos) = set.binary_search(&c) {
        set.insert(pos, c);
    }
}

fn intersects(a: &[ClassId], b: &[ClassId]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

impl Schema {
    /// Schema with no types and no declared constraints.
    pub fn new(num_entities: usize, num_relations: usize, num_classes: usize) -> Self {
        Schema {
            num_classes,
            entity_classes: vec![Vec::new(); num_entities],
            rel_domain: vec![None; num_relations],
            rel_range: vec![None; num_relations],
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn num_relations(&self) -> usize {
        self.rel_domain.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() >= self.entity_classes.len() {
            return Err(Error::usage(format!(
                "entity id {e} out of bounds (|E| = {})",
                self.entity_classes.len()
            )));
        }
        Ok(())
    }

    fn check_relation(&self, r: RelationId) -> Result<()> {
        if r.index() >= self.rel_domain.len() {
            return Err(Error::usage(format!(
                "relation id {r} out of bounds (|R| = {})",
                self.rel_domain.len()
            )));
        }
        Ok(())
    }

    fn check_class(&self, c: ClassId) -> Result<()> {
        if c.index() >= self.num_classes {
            return Err(Error::usage(format!(
                "class id {c} out of bounds (|C| = {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn add_entity_class(&mut self, e: EntityId, c: ClassId) -> Result<()> {
        self.check_entity(e)?;
        self.check_class(c)?;
        insert_sorted(&mut self.entity_classes[e.index()], c);
        Ok(())
    }

    pub fn declare_domain(&mut self, r: RelationId, c: ClassId) -> Result<()> {
        self.check_relation(r)?;
        self.check_class(c)?;
        insert_sorted(self.rel_domain[r.index()].get_or_insert_with(Vec::new), c);
        Ok(())
    }

    pub fn declare_range(&mut self, r: RelationId, c: ClassId) -> Result<()> {
        self.check_relation(r)?;
        self.check_class(c)?;
        insert_sorted(self.rel_range[r.index()].get_or_insert_with(Vec::new), c);
        Ok(())
    }

    pub fn entity_classes(&self, e: EntityId) -> &[ClassId] {
        &self.entity_classes[e.index()]
    }

    pub fn domain(&self, r: RelationId) -> Option<&[ClassId]> {
        self.rel_domain[r.index()].as_deref()
    }

    pub fn range(&self, r: RelationId) -> Option<&[ClassId]> {
        self.rel_range[r.index()].as_deref()
    }

    /// Constraint set for the given side: domain for heads, range for tails.
    pub fn constraint(&self, r: RelationId, side: Side) -> Option<&[ClassId]> {
        match side {
            Side::Head => self.domain(r),
            Side::Tail => self.range(r),
        }
    }

    /// Both domain and range declared.
    pub fn is_fully_declared(&self, r: RelationId) -> bool {
        self.rel_domain[r.index()].is_some() && self.rel_range[r.index()].is_some()
    }

    /// Whether `e` may fill `side` of relation `r`. Ids are assumed in bounds.
    #[inline]
    pub fn side_ok(&self, e: EntityId, r: RelationId, side: Side) -> bool {
        match self.constraint(r, side) {
            None => true,
            Some(allowed) => intersects(&self.entity_classes[e.index()], allowed),
        }
    }

    /// Unchecked validity; callers guarantee bounds.
    #[inline]
    pub fn triple_ok(&self, t: &Triple) -> bool {
        self.side_ok(t.head, t.rel, Side::Head) && self.side_ok(t.tail, t.rel, Side::Tail)
    }

    /// Schema restricted and re-indexed to the given entity and relation subsets.
    /// `entity_map[old] = Some(new)` keeps an entity.
    pub(crate) fn reindex(
        &self,
        entity_map: &[Option<EntityId>],
        relation_map: &[Option<RelationId>],
        num_entities: usize,
        num_relations: usize,
    ) -> Schema {
        let mut out = Schema::new(num_entities, num_relations, self.num_classes);
        for (old, new) in entity_map.iter().enumerate() {
            if let Some(new) = new {
                out.entity_classes[new.index()] = self.entity_classes[old].clone();
            }
        }
        for (old, new) in relation_map.iter().enumerate() {
            if let Some(new) = new {
                out.rel_domain[new.index()] = self.rel_domain[old].clone();
                out.rel_range[new.index()] = self.rel_range[old].clone();
            }
        }
        out
    }
}

/// True iff the triple respects both the domain and the range of its relation.
pub fn is_sem_valid(t: &Triple, schema: &Schema) -> Result<bool> {
    schema.check_entity(t.head)?;
    schema.check_entity(t.tail)?;
    schema.check_relation(t.rel)?;
    Ok(schema.triple_ok(t))
}

/// Entities admissible on `side` of `r`, ascending.
pub fn sem_valid_candidates(r: RelationId, side: Side, kg: &KnowledgeGraph) -> Result<Vec<EntityId>> {
    kg.schema.check_relation(r)?;
    Ok((0..kg.num_entities)
        .map(EntityId::from)
        .filter(|&e| kg.schema.side_ok(e, r, side))
        .collect())
}

/// Integer-id triple store with train/valid/test splits and a schema.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    schema: Schema,
    vocab: Vocab,
    all_true: HashSet<Triple>,
    known_tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    known_heads: HashMap<(RelationId, EntityId), Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Builds the graph and checks bounds and split disjointness.
    pub fn new(vocab: Vocab, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>, schema: Schema) -> Result<Self> {
        let num_entities = vocab.entities.len();
        let num_relations = vocab.relations.len();
        if schema.num_entities() != num_entities || schema.num_relations() != num_relations {
            return Err(Error::usage(format!(
                "schema sized for {}x{} but vocabulary has {} entities and {} relations",
                schema.num_entities(),
                schema.num_relations(),
                num_entities,
                num_relations
            )));
        }
        if schema.num_classes() != vocab.classes.len() {
            return Err(Error::usage(format!(
                "schema has {} classes but vocabulary has {}",
                schema.num_classes(),
                vocab.classes.len()
            )));
        }

        let mut all_true = HashSet::with_capacity(train.len() + valid.len() + test.len());
        let mut owner: HashMap<Triple, Split> = HashMap::new();
        for (split, triples) in [(Split::Train, &train), (Split::Valid, &valid), (Split::Test, &test)] {
            for t in triples.iter() {
                if t.head.index() >= num_entities || t.tail.index() >= num_entities || t.rel.index() >= num_relations {
                    return Err(Error::usage(format!(
                        "{split} triple ({}, {}, {}) out of bounds (|E| = {num_entities}, |R| = {num_relations})",
                        t.head, t.rel, t.tail
                    )));
                }
                if let Some(prev) = owner.insert(*t, split) {
                    if prev != split {
                        return Err(Error::usage(format!(
                            "triple ({}, {}, {}) appears in both {prev} and {split}",
                            t.head, t.rel, t.tail
                        )));
                    }
                }
                all_true.insert(*t);
            }
        }

        let mut known_tails: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut known_heads: HashMap<(RelationId, EntityId), Vec<EntityId>> = HashMap::new();
        let mut sorted: Vec<&Triple> = all_true.iter().collect();
        sorted.sort();
        for t in sorted {
            known_tails.entry((t.head, t.rel)).or_default().push(t.tail);
            known_heads.entry((t.rel, t.tail)).or_default().push(t.head);
        }
        for v in known_heads.values_mut() {
            v.sort();
        }

        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            train,
            valid,
            test,
            schema,
            vocab,
            all_true,
            known_tails,
            known_heads,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn all_true(&self) -> &HashSet<Triple> {
        &self.all_true
    }

    pub fn is_true(&self, t: &Triple) -> bool {
        self.all_true.contains(t)
    }

    /// Every known completion of `t` on `side` across all splits (includes `t`'s own entity), ascending.
    pub fn known_completions(&self, t: &Triple, side: Side) -> &[EntityId] {
        let found = match side {
            Side::Tail => self.known_tails.get(&(t.head, t.rel)),
            Side::Head => self.known_heads.get(&(t.rel, t.tail)),
        };
        found.map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Precomputed admissible-entity lists per `(relation, side)`.
#[derive(Clone, Debug)]
pub struct SemIndex {
    num_entities: usize,
    // indexed by 2 * relation + side
    masks: Vec<Vec<bool>>,
    valid: Vec<Vec<EntityId>>,
    invalid: Vec<Vec<EntityId>>,
}

#[inline]
fn slot(r: RelationId, side: Side) -> usize {
    2 * r.index() + side as usize
}

impl SemIndex {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        Self::from_schema(kg.schema(), kg.num_entities())
    }

    pub fn from_schema(schema: &Schema, num_entities: usize) -> Self {
        let slots = 2 * schema.num_relations();
        let mut masks = Vec::with_capacity(slots);
        let mut valid = Vec::with_capacity(slots);
        let mut invalid = Vec::with_capacity(slots);
        for r in (0..schema.num_relations()).map(RelationId::from) {
            for side in Side::BOTH {
                let mask: Vec<bool> = (0..num_entities)
                    .map(|e| schema.side_ok(EntityId::from(e), r, side))
                    .collect();
                let (ok, bad): (Vec<_>, Vec<_>) = (0..num_entities).map(EntityId::from).partition(|e| mask[e.index()]);
                masks.push(mask);
                valid.push(ok);
                invalid.push(bad);
            }
        }
        SemIndex {
            num_entities,
            masks,
            valid,
            invalid,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Entities admissible on `side` of `r`, ascending.
    pub fn candidates(&self, r: RelationId, side: Side) -> &[EntityId] {
        &self.valid[slot(r, side)]
    }

    /// Complement of [`SemIndex::candidates`], ascending.
    pub fn non_candidates(&self, r: RelationId, side: Side) -> &[EntityId] {
        &self.invalid[slot(r, side)]
    }

    pub fn mask(&self, r: RelationId, side: Side) -> &[bool] {
        &self.masks[slot(r, side)]
    }

    #[inline]
    pub fn is_candidate(&self, r: RelationId, side: Side, e: EntityId) -> bool {
        self.masks[slot(r, side)][e.index()]
    }

    #[inline]
    pub fn is_valid(&self, t: &Triple) -> bool {
        self.is_candidate(t.rel, Side::Head, t.head) && self.is_candidate(t.rel, Side::Tail, t.tail)
    }
}
