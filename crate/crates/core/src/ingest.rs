//! TSV loading, corpus statistics and the schema-aware dataset filter.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{ClassId, EntityId, KnowledgeGraph, Labels, RelationId, Schema, Side, Triple, Vocab};

/// Minimum number of admissible candidates (exclusive) on each side of an evaluated relation.
pub const MIN_EVAL_CANDIDATES: usize = 10;

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn for_each_record<R: Read>(
    reader: BufReader<R>,
    path: &Path,
    arity: usize,
    mut f: impl FnMut(&[&str]) -> Result<()>,
) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != arity {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {arity} tab-separated fields, found {}", fields.len()),
            });
        }
        f(&fields)?;
    }
    Ok(())
}

/// Parses `head<TAB>relation<TAB>tail` lines, extending the vocabularies in first-appearance order.
pub fn parse_triples<R: Read>(
    reader: R,
    path: &Path,
    entities: &mut Labels,
    relations: &mut Labels,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for_each_record(BufReader::new(reader), path, 3, |f| {
        let h = entities.intern(f[0]);
        let r = relations.intern(f[1]);
        let t = entities.intern(f[2]);
        out.push(Triple::from((h, r, t)));
        Ok(())
    })?;
    Ok(out)
}

pub fn load_triples(path: &Path, entities: &mut Labels, relations: &mut Labels) -> Result<Vec<Triple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(file, path, entities, relations)
}

/// Reads entity-type, domain and range files against existing vocabularies.
///
/// Classes are interned in first-appearance order across the three files. Lines naming an
/// entity or relation absent from the vocabulary are skipped and reported as warnings.
pub fn load_schema(
    entity_types: &Path,
    domains: &Path,
    ranges: &Path,
    vocab: &mut Vocab,
) -> Result<(Schema, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut typings: Vec<(EntityId, ClassId)> = Vec::new();
    let mut doms: Vec<(RelationId, ClassId)> = Vec::new();
    let mut rans: Vec<(RelationId, ClassId)> = Vec::new();

    for_each_record(open(entity_types)?, entity_types, 2, |f| {
        let c = ClassId(vocab.classes.intern(f[1]));
        match vocab.entities.get(f[0]) {
            Some(e) => typings.push((EntityId(e), c)),
            None => warnings.push(format!("{}: unknown entity {:?}", entity_types.display(), f[0])),
        }
        Ok(())
    })?;
    for (path, sink) in [(domains, &mut doms), (ranges, &mut rans)] {
        for_each_record(open(path)?, path, 2, |f| {
            let c = ClassId(vocab.classes.intern(f[1]));
            match vocab.relations.get(f[0]) {
                Some(r) => sink.push((RelationId(r), c)),
                None => warnings.push(format!("{}: unknown relation {:?}", path.display(), f[0])),
            }
            Ok(())
        })?;
    }

    let mut schema = Schema::new(vocab.entities.len(), vocab.relations.len(), vocab.classes.len());
    for (e, c) in typings {
        schema.add_entity_class(e, c)?;
    }
    for (r, c) in doms {
        schema.declare_domain(r, c)?;
    }
    for (r, c) in rans {
        schema.declare_range(r, c)?;
    }
    Ok((schema, warnings))
}

/// Locations of the six input files of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entity_types: PathBuf,
    pub domains: PathBuf,
    pub ranges: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            entity_types: dir.join("entity_types.tsv"),
            domains: dir.join("domains.tsv"),
            ranges: dir.join("ranges.tsv"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Path> {
        [
            &self.train,
            &self.valid,
            &self.test,
            &self.entity_types,
            &self.domains,
            &self.ranges,
        ]
        .into_iter()
        .map(PathBuf::as_path)
    }

    /// Fails on the first path that does not exist.
    pub fn check_exist(&self) -> Result<()> {
        for p in self.iter() {
            if !p.is_file() {
                return Err(Error::config(format!("missing input file {}", p.display())));
            }
        }
        Ok(())
    }
}

pub struct LoadedDataset {
    pub kg: KnowledgeGraph,
    pub warnings: Vec<String>,
}

/// Loads splits (train, valid, test) then schema files into a knowledge graph.
pub fn load_dataset(paths: &DatasetPaths) -> Result<LoadedDataset> {
    let mut vocab = Vocab::default();
    let train = load_triples(&paths.train, &mut vocab.entities, &mut vocab.relations)?;
    let valid = load_triples(&paths.valid, &mut vocab.entities, &mut vocab.relations)?;
    let test = load_triples(&paths.test, &mut vocab.entities, &mut vocab.relations)?;
    let (schema, warnings) = load_schema(&paths.entity_types, &paths.domains, &paths.ranges, &mut vocab)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let kg = KnowledgeGraph::new(vocab, train, valid, test, schema)?;
    Ok(LoadedDataset { kg, warnings })
}

/// Writes the dataset as six TSV files using the layout of [`DatasetPaths::in_dir`].
pub fn write_dataset(kg: &KnowledgeGraph, dir: &Path) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    let vocab = kg.vocab();
    let ent = |e: EntityId| vocab.entities.name(e.0);
    let rel = |r: RelationId| vocab.relations.name(r.0);
    let cls = |c: ClassId| vocab.classes.name(c.0);

    let write = |path: &Path, body: String| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    };
    for (path, triples) in [(&paths.train, kg.train()), (&paths.valid, kg.valid()), (&paths.test, kg.test())] {
        let mut body = String::new();
        for t in triples {
            let _ = writeln!(body, "{}\t{}\t{}", ent(t.head), rel(t.rel), ent(t.tail));
        }
        write(path, body)?;
    }

    let schema = kg.schema();
    let mut body = String::new();
    for e in (0..kg.num_entities()).map(EntityId::from) {
        for &c in schema.entity_classes(e) {
            let _ = writeln!(body, "{}\t{}", ent(e), cls(c));
        }
    }
    write(&paths.entity_types, body)?;
    for (path, side) in [(&paths.domains, Side::Head), (&paths.ranges, Side::Tail)] {
        let mut body = String::new();
        for r in (0..kg.num_relations()).map(RelationId::from) {
            for &c in schema.constraint(r, side).unwrap_or(&[]) {
                let _ = writeln!(body, "{}\t{}", rel(r), cls(c));
            }
        }
        write(path, body)?;
    }
    Ok(paths)
}

/// Corpus size counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "entities")]
    pub num_entities: usize,
    #[serde(rename = "relations")]
    pub num_relations: usize,
    #[serde(rename = "train")]
    pub num_train: usize,
    #[serde(rename = "valid")]
    pub num_valid: usize,
    #[serde(rename = "test")]
    pub num_test: usize,
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl DatasetStats {
    /// Header plus one row: `Dataset |E| |R| |T_train| |T_valid| |T_test|`.
    pub fn table(&self, name: &str) -> String {
        let cells = [
            self.num_entities,
            self.num_relations,
            self.num_train,
            self.num_valid,
            self.num_test,
        ]
        .map(thousands);
        let width = name.len().max(7);
        let mut s = format!(
            "{:<width$} {:>10} {:>6} {:>10} {:>10} {:>10}\n",
            "Dataset", "|E|", "|R|", "|T_train|", "|T_valid|", "|T_test|"
        );
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>6} {:>10} {:>10} {:>10}",
            name, cells[0], cells[1], cells[2], cells[3], cells[4]
        );
        s
    }
}

pub fn stats(kg: &KnowledgeGraph) -> DatasetStats {
    DatasetStats {
        num_entities: kg.num_entities(),
        num_relations: kg.num_relations(),
        num_train: kg.train().len(),
        num_valid: kg.valid().len(),
        num_test: kg.test().len(),
    }
}

/// Admissible-entity counts per `(relation, side)` restricted to `active` entities.
fn candidate_counts(schema: &Schema, active: &[bool]) -> Vec<[usize; 2]> {
    (0..schema.num_relations())
        .map(RelationId::from)
        .map(|r| {
            Side::BOTH.map(|side| {
                active
                    .iter()
                    .enumerate()
                    .filter(|&(e, &on)| on && schema.side_ok(EntityId::from(e), r, side))
                    .count()
            })
        })
        .collect()
}

fn entity_mask(triples: &[Triple], n: usize) -> Vec<bool> {
    let mut mask = vec![false; n];
    for t in triples {
        mask[t.head.index()] = true;
        mask[t.tail.index()] = true;
    }
    mask
}

/// Whether a train triple has another admissible counterpart on both sides among `counts`.
fn train_triple_ok(schema: &Schema, t: &Triple, counts: &[[usize; 2]]) -> bool {
    if !schema.is_fully_declared(t.rel) {
        return false;
    }
    let head_ok = schema.side_ok(t.head, t.rel, Side::Head);
    let tail_ok = schema.side_ok(t.tail, t.rel, Side::Tail);
    let [heads, tails] = counts[t.rel.index()];
    // (h', r, t) valid for some h' != h, and (h, r, t') valid for some t' != t
    let alt_heads = heads - usize::from(head_ok);
    let alt_tails = tails - usize::from(tail_ok);
    tail_ok && alt_heads >= 1 && head_ok && alt_tails >= 1
}

/// Keeps only the data that meets the experimental criteria, iterating to a fixed point:
///
/// 1. train relations have a declared domain and range;
/// 2. every train triple has another admissible head and another admissible tail;
/// 3. valid/test relations are declared and have more than ten admissible candidates per side;
/// 4. valid/test triples only use entities and relations that survive in train.
///
/// Candidate counts are taken over the entities of the filtered train split. The result is
/// re-indexed in first-appearance order so that writing and reloading it is lossless.
pub fn filter_dataset(kg: &KnowledgeGraph) -> Result<KnowledgeGraph> {
    let schema = kg.schema();
    let n = kg.num_entities();
    let mut train: Vec<Triple> = kg.train().to_vec();
    loop {
        let active = entity_mask(&train, n);
        let counts = candidate_counts(schema, &active);
        let before = train.len();
        train.retain(|t| train_triple_ok(schema, t, &counts));
        if train.len() == before {
            break;
        }
    }
    if train.is_empty() {
        return Err(Error::config("dataset filter removed every training triple"));
    }

    let active = entity_mask(&train, n);
    let counts = candidate_counts(schema, &active);
    let relations: HashSet<RelationId> = train.iter().map(|t| t.rel).collect();
    let eval_ok = |t: &&Triple| {
        active[t.head.index()]
            && active[t.tail.index()]
            && relations.contains(&t.rel)
            && schema.is_fully_declared(t.rel)
            && counts[t.rel.index()].iter().all(|&c| c > MIN_EVAL_CANDIDATES)
    };
    let valid: Vec<Triple> = kg.valid().iter().filter(eval_ok).copied().collect();
    let test: Vec<Triple> = kg.test().iter().filter(eval_ok).copied().collect();

    reindex(kg, train, valid, test)
}

/// Compacts ids to first-appearance order over (train, valid, test) and classes over
/// (entity types, domains, ranges), dropping everything unused.
fn reindex(kg: &KnowledgeGraph, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<KnowledgeGraph> {
    let old_vocab = kg.vocab();
    let schema = kg.schema();
    let mut vocab = Vocab::default();
    let mut entity_map: Vec<Option<EntityId>> = vec![None; kg.num_entities()];
    let mut relation_map: Vec<Option<RelationId>> = vec![None; kg.num_relations()];

    let mut remap = |triples: Vec<Triple>, vocab: &mut Vocab| -> Vec<Triple> {
        triples
            .into_iter()
            .map(|t| {
                let mut ent = |e: EntityId| {
                    *entity_map[e.index()].get_or_insert_with(|| EntityId(vocab.entities.intern(old_vocab.entities.name(e.0))))
                };
                let h = ent(t.head);
                let r = *relation_map[t.rel.index()]
                    .get_or_insert_with(|| RelationId(vocab.relations.intern(old_vocab.relations.name(t.rel.0))));
                let tail = ent(t.tail);
                Triple { head: h, rel: r, tail }
            })
            .collect()
    };
    let train = remap(train, &mut vocab);
    let valid = remap(valid, &mut vocab);
    let test = remap(test, &mut vocab);

    let squeezed = schema.reindex(&entity_map, &relation_map, vocab.entities.len(), vocab.relations.len());

    // Class order: as the files would list them when written in entity/relation order.
    let mut class_map: Vec<Option<ClassId>> = vec![None; schema.num_classes()];
    let mut order = |c: ClassId, vocab: &mut Vocab| {
        *class_map[c.index()].get_or_insert_with(|| ClassId(vocab.classes.intern(old_vocab.classes.name(c.0))))
    };
    let mut typings = Vec::new();
    for e in (0..vocab.entities.len()).map(EntityId::from) {
        for &c in squeezed.entity_classes(e) {
            typings.push((e, order(c, &mut vocab)));
        }
    }
    let mut constraints = Vec::new();
    for side in Side::BOTH {
        for r in (0..vocab.relations.len()).map(RelationId::from) {
            for &c in squeezed.constraint(r, side).unwrap_or(&[]) {
                constraints.push((r, side, order(c, &mut vocab)));
            }
        }
    }

    let mut out = Schema::new(vocab.entities.len(), vocab.relations.len(), vocab.classes.len());
    for (e, c) in typings {
        out.add_entity_class(e, c)?;
    }
    for (r, side, c) in constraints {
        match side {
            Side::Head => out.declare_domain(r, c)?,
            Side::Tail => out.declare_range(r, c)?,
        }
    }
    KnowledgeGraph::new(vocab, train, valid, test, out)
}
