//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEMKGE01"  kind:u8  |E|:u64  |R|:u64  d:u64
//! parameter tables, f64, in the model's storage order
//! has_optimizer:u8  [adam step:u64, first moments, second moments]
//! meta_len:u64  meta (JSON: config, epoch, history)
//! sha256 of everything above (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::models::{ModelKind, ModelParams, Table};
use crate::trainer::{Adam, LogRecord};

pub const MAGIC: &[u8; 8] = b"SEMKGE01";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs at the time of the snapshot.
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
    pub history: Vec<LogRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    history: Vec<LogRecord>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind()
            )));
        }
        Ok(())
    }

    /// Errors unless entity and relation counts match `kg`.
    pub fn check_dataset(&self, kg: &KnowledgeGraph) -> Result<()> {
        crate::eval::check_compatible(&self.params, kg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(p.kind().code());
        for n in [p.num_entities(), p.num_relations(), p.dim()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        put_tables(&mut out, p.tables());
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step_count().to_le_bytes());
                put_tables(&mut out, adam.first_moments());
                put_tables(&mut out, adam.second_moments());
            }
        }
        let meta = Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serialises");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint or unsupported format version".into()));
        }
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupted".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let code = r.u8()?;
        let kind =
            ModelKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown model kind code {code}")))?;
        let num_entities = r.len()?;
        let num_relations = r.len()?;
        let dim = r.len()?;
        let tables = r.tables(kind, num_entities, num_relations, dim)?;
        let params = ModelParams::from_tables(kind, num_entities, num_relations, dim, tables)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.tables(kind, num_entities, num_relations, dim)?;
                let v = r.tables(kind, num_entities, num_relations, dim)?;
                Some(Adam::from_parts(step, m, v))
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        let meta_len = r.len()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after metadata".into()));
        }
        if meta.config.model != kind || meta.config.dim != dim {
            return Err(Error::Checkpoint(format!(
                "header says {kind} with d = {dim} but the stored config says {} with d = {}",
                meta.config.model, meta.config.dim
            )));
        }
        Ok(Checkpoint {
            config: meta.config,
            epoch: meta.epoch,
            params,
            optimizer,
            history: meta.history,
        })
    }
}

fn put_tables(out: &mut Vec<u8>, tables: &[Table]) {
    for t in tables {
        for x in t.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size field overflows".into()))
    }

    fn tables(&mut self, kind: ModelKind, num_entities: usize, num_relations: usize, dim: usize) -> Result<Vec<Table>> {
        kind.layout()
            .iter()
            .map(|&(_, per_entity)| {
                let rows = if per_entity { num_entities } else { num_relations };
                let n = rows
                    .checked_mul(dim)
                    .and_then(|n| n.checked_mul(8))
                    .ok_or_else(|| Error::Checkpoint("table size overflows".into()))?;
                let data = self
                    .take(n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Table::from_vec(rows, dim, data).map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
