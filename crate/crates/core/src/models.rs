//! Scoring functions and their analytic gradients.
//!
//! Every model reports "higher is more plausible": translational distances are negated.
//! Distances use the L2 norm.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, Side, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    TransH,
    DistMult,
    ComplEx,
    SimplE,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::TransE,
        ModelKind::TransH,
        ModelKind::DistMult,
        ModelKind::ComplEx,
        ModelKind::SimplE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TransE => "transe",
            ModelKind::TransH => "transh",
            ModelKind::DistMult => "distmult",
            ModelKind::ComplEx => "complex",
            ModelKind::SimplE => "simple",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ModelKind::TransE => 1,
            ModelKind::TransH => 2,
            ModelKind::DistMult => 3,
            ModelKind::ComplEx => 4,
            ModelKind::SimplE => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Parameter tables in storage order, as `(name, holds entity rows)`.
    pub fn layout(self) -> &'static [(&'static str, bool)] {
        match self {
            ModelKind::TransE | ModelKind::DistMult => &[("entity", true), ("relation", false)],
            ModelKind::TransH => &[("entity", true), ("relation", false), ("normal", false)],
            ModelKind::ComplEx => &[
                ("entity_re", true),
                ("entity_im", true),
                ("relation_re", false),
                ("relation_im", false),
            ],
            ModelKind::SimplE => &[
                ("entity_head", true),
                ("entity_tail", true),
                ("relation", false),
                ("relation_inv", false),
            ],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown model {s:?}")))
    }
}

/// Dense row-major `rows × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Table {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::usage(format!(
                "table data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        Ok(Table { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Embedding tables of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    dim: usize,
    num_entities: usize,
    num_relations: usize,
    tables: Vec<Table>,
}

// table slots
const ENT: usize = 0;
const REL: usize = 1;
const NORMAL: usize = 2;
const ENT_RE: usize = 0;
const ENT_IM: usize = 1;
const REL_RE: usize = 2;
const REL_IM: usize = 3;
const ENT_HEAD: usize = 0;
const ENT_TAIL: usize = 1;
const REL_FWD: usize = 2;
const REL_INV: usize = 3;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn trilinear(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((x, y), z)| x * y * z).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl ModelParams {
    /// Xavier-uniform initialisation in `±sqrt(6 / 2d)`, deterministic in `seed`.
    /// Tables are filled in storage order from one generator; TransH normals are then unit-normed.
    pub fn init(kind: ModelKind, num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let bound = (6.0 / (2.0 * dim as f64)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tables = Vec::new();
        for &(_, per_entity) in kind.layout() {
            let rows = if per_entity { num_entities } else { num_relations };
            let mut t = Table::zeros(rows, dim);
            for x in t.as_mut_slice() {
                *x = rng.gen_range(-bound..bound);
            }
            tables.push(t);
        }
        let mut params = ModelParams {
            kind,
            dim,
            num_entities,
            num_relations,
            tables,
        };
        params.normalize_normals(0..num_relations);
        Ok(params)
    }

    /// Assembles parameters from raw tables, checking shapes against `kind`'s layout.
    pub fn from_tables(
        kind: ModelKind,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        tables: Vec<Table>,
    ) -> Result<Self> {
        let layout = kind.layout();
        if tables.len() != layout.len() {
            return Err(Error::usage(format!(
                "{kind} expects {} tables, got {}",
                layout.len(),
                tables.len()
            )));
        }
        for (t, &(name, per_entity)) in tables.iter().zip(layout) {
            let rows = if per_entity { num_entities } else { num_relations };
            if t.rows() != rows || t.dim() != dim {
                return Err(Error::usage(format!(
                    "{kind} table {name} is {}x{}, expected {rows}x{dim}",
                    t.rows(),
                    t.dim()
                )));
            }
        }
        Ok(ModelParams {
            kind,
            dim,
            num_entities,
            num_relations,
            tables,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Table] {
        &mut self.tables
    }

    /// Whether table `slot` holds entity rows.
    pub fn is_entity_table(&self, slot: usize) -> bool {
        self.kind.layout()[slot].1
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().all(|t| t.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Re-projects TransH hyperplane normals of the given relations onto the unit sphere.
    pub fn normalize_normals(&mut self, relations: impl IntoIterator<Item = usize>) {
        if self.kind == ModelKind::TransH {
            for r in relations {
                normalize(self.tables[NORMAL].row_mut(r));
            }
        }
    }

    fn check(&self, t: &Triple) -> Result<()> {
        if t.head.index() >= self.num_entities || t.tail.index() >= self.num_entities {
            return Err(Error::usage(format!(
                "entity out of bounds in ({}, {}, {}) for |E| = {}",
                t.head, t.rel, t.tail, self.num_entities
            )));
        }
        if t.rel.index() >= self.num_relations {
            return Err(Error::usage(format!(
                "relation {} out of bounds for |R| = {}",
                t.rel, self.num_relations
            )));
        }
        Ok(())
    }

    /// Score of one in-bounds triple.
    pub fn score_one(&self, t: &Triple) -> f64 {
        let (h, r, tl) = (t.head.index(), t.rel.index(), t.tail.index());
        let tb = &self.tables;
        match self.kind {
            ModelKind::TransE => {
                let (eh, er, et) = (tb[ENT].row(h), tb[REL].row(r), tb[ENT].row(tl));
                -eh.iter()
                    .zip(er)
                    .zip(et)
                    .map(|((a, b), c)| {
                        let u = a + b - c;
                        u * u
                    })
                    .sum::<f64>()
                    .sqrt()
            }
            ModelKind::TransH => {
                let (eh, et) = (tb[ENT].row(h), tb[ENT].row(tl));
                let (d, w) = (tb[REL].row(r), tb[NORMAL].row(r));
                let (ph, pt) = (dot(w, eh), dot(w, et));
                let mut sq = 0.0;
                for i in 0..self.dim {
                    let u = (eh[i] - ph * w[i]) + d[i] - (et[i] - pt * w[i]);
                    sq += u * u;
                }
                -sq.sqrt()
            }
            ModelKind::DistMult => trilinear(tb[ENT].row(h), tb[REL].row(r), tb[ENT].row(tl)),
            ModelKind::ComplEx => {
                let (hr, hi) = (tb[ENT_RE].row(h), tb[ENT_IM].row(h));
                let (tr, ti) = (tb[ENT_RE].row(tl), tb[ENT_IM].row(tl));
                let (rr, ri) = (tb[REL_RE].row(r), tb[REL_IM].row(r));
                let mut s = 0.0;
                for i in 0..self.dim {
                    s += hr[i] * rr[i] * tr[i] + hi[i] * rr[i] * ti[i] + hr[i] * ri[i] * ti[i]
                        - hi[i] * ri[i] * tr[i];
                }
                s
            }
            ModelKind::SimplE => {
                let fwd = trilinear(tb[ENT_HEAD].row(h), tb[REL_FWD].row(r), tb[ENT_TAIL].row(tl));
                let inv = trilinear(tb[ENT_TAIL].row(h), tb[REL_INV].row(r), tb[ENT_HEAD].row(tl));
                0.5 * (fwd + inv)
            }
        }
    }

    /// Marks every row read by `score_one(t)` as touched in `buf`, leaving values unchanged.
    pub fn touch(&self, t: &Triple, buf: &mut GradBuffer) {
        for (slot, &(_, per_entity)) in self.kind.layout().iter().enumerate() {
            if per_entity {
                buf.row_mut(slot, t.head.index());
                buf.row_mut(slot, t.tail.index());
            } else {
                buf.row_mut(slot, t.rel.index());
            }
        }
    }

    /// Adds `weight · ∇ score(t)` into `buf`.
    pub fn accumulate_grad(&self, t: &Triple, weight: f64, buf: &mut GradBuffer) {
        if weight == 0.0 {
            return;
        }
        let (h, r, tl) = (t.head.index(), t.rel.index(), t.tail.index());
        let tb = &self.tables;
        let d = self.dim;
        match self.kind {
            ModelKind::TransE => {
                let (eh, er, et) = (tb[ENT].row(h), tb[REL].row(r), tb[ENT].row(tl));
                let u: Vec<f64> = (0..d).map(|i| eh[i] + er[i] - et[i]).collect();
                let n = dot(&u, &u).sqrt();
                if n == 0.0 {
                    return;
                }
                let g: Vec<f64> = u.iter().map(|x| -weight * x / n).collect();
                add(buf.row_mut(ENT, h), &g, 1.0);
                add(buf.row_mut(REL, r), &g, 1.0);
                add(buf.row_mut(ENT, tl), &g, -1.0);
            }
            ModelKind::TransH => {
                let (eh, et) = (tb[ENT].row(h), tb[ENT].row(tl));
                let (dr, w) = (tb[REL].row(r), tb[NORMAL].row(r));
                let (ph, pt) = (dot(w, eh), dot(w, et));
                let u: Vec<f64> = (0..d)
                    .map(|i| (eh[i] - ph * w[i]) + dr[i] - (et[i] - pt * w[i]))
                    .collect();
                let n = dot(&u, &u).sqrt();
                if n == 0.0 {
                    return;
                }
                let g: Vec<f64> = u.iter().map(|x| -weight * x / n).collect();
                let gw = dot(&g, w);
                let proj: Vec<f64> = (0..d).map(|i| g[i] - gw * w[i]).collect();
                add(buf.row_mut(ENT, h), &proj, 1.0);
                add(buf.row_mut(ENT, tl), &proj, -1.0);
                add(buf.row_mut(REL, r), &g, 1.0);
                let dw = buf.row_mut(NORMAL, r);
                for i in 0..d {
                    dw[i] += -gw * (eh[i] - et[i]) - (ph - pt) * g[i];
                }
            }
            ModelKind::DistMult => {
                let (eh, er, et) = (tb[ENT].row(h), tb[REL].row(r), tb[ENT].row(tl));
                let gh: Vec<f64> = (0..d).map(|i| weight * er[i] * et[i]).collect();
                let gr: Vec<f64> = (0..d).map(|i| weight * eh[i] * et[i]).collect();
                let gt: Vec<f64> = (0..d).map(|i| weight * eh[i] * er[i]).collect();
                add(buf.row_mut(ENT, h), &gh, 1.0);
                add(buf.row_mut(REL, r), &gr, 1.0);
                add(buf.row_mut(ENT, tl), &gt, 1.0);
            }
            ModelKind::ComplEx => {
                let (hr, hi) = (tb[ENT_RE].row(h), tb[ENT_IM].row(h));
                let (tr, ti) = (tb[ENT_RE].row(tl), tb[ENT_IM].row(tl));
                let (rr, ri) = (tb[REL_RE].row(r), tb[REL_IM].row(r));
                let ghr: Vec<f64> = (0..d).map(|i| weight * (rr[i] * tr[i] + ri[i] * ti[i])).collect();
                let ghi: Vec<f64> = (0..d).map(|i| weight * (rr[i] * ti[i] - ri[i] * tr[i])).collect();
                let grr: Vec<f64> = (0..d).map(|i| weight * (hr[i] * tr[i] + hi[i] * ti[i])).collect();
                let gri: Vec<f64> = (0..d).map(|i| weight * (hr[i] * ti[i] - hi[i] * tr[i])).collect();
                let gtr: Vec<f64> = (0..d).map(|i| weight * (hr[i] * rr[i] - hi[i] * ri[i])).collect();
                let gti: Vec<f64> = (0..d).map(|i| weight * (hi[i] * rr[i] + hr[i] * ri[i])).collect();
                add(buf.row_mut(ENT_RE, h), &ghr, 1.0);
                add(buf.row_mut(ENT_IM, h), &ghi, 1.0);
                add(buf.row_mut(REL_RE, r), &grr, 1.0);
                add(buf.row_mut(REL_IM, r), &gri, 1.0);
                add(buf.row_mut(ENT_RE, tl), &gtr, 1.0);
                add(buf.row_mut(ENT_IM, tl), &gti, 1.0);
            }
            ModelKind::SimplE => {
                let c = 0.5 * weight;
                let (a, rf, b) = (tb[ENT_HEAD].row(h), tb[REL_FWD].row(r), tb[ENT_TAIL].row(tl));
                let (ct, ri, dh) = (tb[ENT_TAIL].row(h), tb[REL_INV].row(r), tb[ENT_HEAD].row(tl));
                let ga: Vec<f64> = (0..d).map(|i| c * rf[i] * b[i]).collect();
                let grf: Vec<f64> = (0..d).map(|i| c * a[i] * b[i]).collect();
                let gb: Vec<f64> = (0..d).map(|i| c * a[i] * rf[i]).collect();
                let gc: Vec<f64> = (0..d).map(|i| c * ri[i] * dh[i]).collect();
                let gri: Vec<f64> = (0..d).map(|i| c * ct[i] * dh[i]).collect();
                let gd: Vec<f64> = (0..d).map(|i| c * ct[i] * ri[i]).collect();
                add(buf.row_mut(ENT_HEAD, h), &ga, 1.0);
                add(buf.row_mut(REL_FWD, r), &grf, 1.0);
                add(buf.row_mut(ENT_TAIL, tl), &gb, 1.0);
                add(buf.row_mut(ENT_TAIL, h), &gc, 1.0);
                add(buf.row_mut(REL_INV, r), &gri, 1.0);
                add(buf.row_mut(ENT_HEAD, tl), &gd, 1.0);
            }
        }
    }
}

#[inline]
fn add(dst: &mut [f64], src: &[f64], sign: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += sign * s;
    }
}

/// Gradient tables shaped like a model's parameters, with touched-row bookkeeping so that
/// clearing and sparse updates cost only what the batch touched.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    tables: Vec<Table>,
    touched: Vec<Vec<bool>>,
    touched_rows: Vec<Vec<usize>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradBuffer {
            tables: params.tables.iter().map(|t| Table::zeros(t.rows(), t.dim())).collect(),
            touched: params.tables.iter().map(|t| vec![false; t.rows()]).collect(),
            touched_rows: vec![Vec::new(); params.tables.len()],
        }
    }

    #[inline]
    pub fn row_mut(&mut self, slot: usize, row: usize) -> &mut [f64] {
        if !self.touched[slot][row] {
            self.touched[slot][row] = true;
            self.touched_rows[slot].push(row);
        }
        self.tables[slot].row_mut(row)
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    /// Rows of table `slot` written since the last clear, in first-touch order.
    pub fn touched_rows(&self, slot: usize) -> &[usize] {
        &self.touched_rows[slot]
    }

    pub fn clear(&mut self) {
        for slot in 0..self.tables.len() {
            for &row in &self.touched_rows[slot] {
                self.tables[slot].row_mut(row).fill(0.0);
                self.touched[slot][row] = false;
            }
            self.touched_rows[slot].clear();
        }
    }
}

pub fn score(params: &ModelParams, batch: &[Triple]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            params.check(t)?;
            Ok(params.score_one(t))
        })
        .collect()
}

/// Gradient of `Σ_i upstream_i · score(batch_i)`.
pub fn grad(params: &ModelParams, batch: &[Triple], upstream: &[f64]) -> Result<GradBuffer> {
    if batch.len() != upstream.len() {
        return Err(Error::usage(format!(
            "batch has {} triples but {} upstream weights",
            batch.len(),
            upstream.len()
        )));
    }
    let mut buf = GradBuffer::zeros_like(params);
    for (t, &w) in batch.iter().zip(upstream) {
        params.check(t)?;
        params.accumulate_grad(t, w, &mut buf);
    }
    Ok(buf)
}

/// Scores of `(fixed, r, e)` (side = tail) or `(e, r, fixed)` (side = head) for every entity `e`.
pub fn score_all(params: &ModelParams, r: RelationId, fixed: EntityId, side: Side) -> Result<Vec<f64>> {
    let probe = Triple {
        head: fixed,
        rel: r,
        tail: fixed,
    };
    params.check(&probe)?;
    Ok((0..params.num_entities)
        .map(|e| params.score_one(&probe.with_entity(side, EntityId::from(e))))
        .collect())
}
