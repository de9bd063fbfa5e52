//! Reference interpreter for loop nests over dense `f64` tensors.
//!
//! Besides the numbers, a run records backing-store traffic as distinct
//! elements per read scope, trigger fires, statement visits and, for every
//! intermediate read on chip, the largest number of simultaneously live
//! elements.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{BinOp, Cascade, EinsumDecl, EinsumId, Expr, Fill, IndexExpr, UnaryOp};
use crate::schedule::{Compute, LoopNest, LoopPart, Node, Source, TriggerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(shape: &[usize]) -> Dense {
        Dense {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], f: impl FnMut(usize) -> f64) -> Dense {
        Dense {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(f).collect(),
        }
    }

    /// Row-major offset of an in-range index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }
}

/// FNV-1a, used to give every input its own reproducible stream.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorStore {
    pub seed: u64,
    pub tensors: BTreeMap<String, Dense>,
}

impl TensorStore {
    /// Fills every input of the cascade. Concatenated inputs are assembled
    /// from their sources, so a merged cascade sees the same values as the
    /// original one for the same seed.
    pub fn synthesize(c: &Cascade, seed: u64) -> TensorStore {
        let mut store = TensorStore {
            seed,
            tensors: BTreeMap::new(),
        };
        let fill = |name: &str, shape: &[usize]| -> Dense {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
            match c.hint(name) {
                Some(Fill::Constant(v)) => Dense::filled(shape, |_| *v),
                Some(Fill::Uniform { lo, hi }) => {
                    Dense::filled(shape, |_| rng.random_range(*lo..*hi))
                }
                None => Dense::filled(shape, |_| rng.random_range(-1.0..1.0)),
            }
        };
        for t in &c.tensors {
            if !c.is_input(&t.name) {
                continue;
            }
            let shape = c.shape(&t.name);
            let dense = match c.derived.iter().find(|d| d.name == t.name) {
                None => fill(&t.name, &shape),
                Some(d) => {
                    let parts: Vec<(Dense, usize)> = d
                        .sources
                        .iter()
                        .map(|(src, n)| {
                            let mut s = shape.clone();
                            s[d.axis] = *n;
                            (fill(src, &s), *n)
                        })
                        .collect();
                    concat(&shape, d.axis, &parts)
                }
            };
            store.tensors.insert(t.name.clone(), dense);
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Dense> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: &str, t: Dense) {
        self.tensors.insert(name.to_string(), t);
    }

    /// Binary dump: per tensor `EINT`, u32 name length, name, u32 rank count,
    /// u64 extents, then the data as little-endian f64.
    pub fn write_dump<'a>(
        &self,
        names: impl IntoIterator<Item = &'a str>,
        w: &mut impl Write,
    ) -> Result<()> {
        for name in names {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Exec(format!("no tensor {name} to dump")))?;
            w.write_all(b"EINT")?;
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for e in &t.shape {
                w.write_all(&(*e as u64).to_le_bytes())?;
            }
            for x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump(r: &mut impl Read) -> Result<TensorStore> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut store = TensorStore::default();
        let mut pos = 0usize;
        let bad = || Error::Exec("truncated or malformed tensor dump".into());
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        while let Ok(magic) = take(4) {
            if magic != b"EINT" {
                return Err(bad());
            }
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?;
            let nd = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
            }
            store.tensors.insert(name, Dense { shape, data });
        }
        Ok(store)
    }
}

fn concat(shape: &[usize], axis: usize, parts: &[(Dense, usize)]) -> Dense {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (p, n) in parts {
            let start = o * n * inner;
            data.extend_from_slice(&p.data[start..start + n * inner]);
        }
    }
    Dense {
        shape: shape.to_vec(),
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerCount {
    pub tensor: String,
    pub consumer: EinsumId,
    pub fires: u64,
    pub expected: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExecutionTrace {
    /// Distinct backing-store elements read, per tensor (summed over read scopes).
    pub reads: BTreeMap<String, u64>,
    pub writes: BTreeMap<String, u64>,
    /// Reads per `(group, pass, tensor)`.
    pub scoped_reads: BTreeMap<(usize, u32, String), u64>,
    /// Writes per `(group, tensor)`.
    pub scoped_writes: BTreeMap<(usize, String), u64>,
    pub itf: BTreeMap<String, u64>,
    pub triggers: Vec<TriggerCount>,
    pub visits: BTreeMap<EinsumId, u64>,
    pub nonfinite: BTreeMap<String, u64>,
}

impl ExecutionTrace {
    pub fn total_reads(&self) -> u64 {
        self.reads.values().sum()
    }

    pub fn total_writes(&self) -> u64 {
        self.writes.values().sum()
    }

    /// `counter,tensor,value` rows in a stable order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("counter,tensor,value\n");
        for (t, v) in &self.reads {
            s += &format!("backing_reads,{t},{v}\n");
        }
        for (t, v) in &self.writes {
            s += &format!("backing_writes,{t},{v}\n");
        }
        for (t, v) in &self.itf {
            s += &format!("max_live_elements,{t},{v}\n");
        }
        for t in &self.triggers {
            s += &format!("trigger_fires,{}->E{},{}\n", t.tensor, t.consumer, t.fires);
        }
        for (e, v) in &self.visits {
            s += &format!("statement_visits,E{e},{v}\n");
        }
        for (t, v) in &self.nonfinite {
            s += &format!("nonfinite_values,{t},{v}\n");
        }
        s
    }
}

#[derive(Debug, Clone)]
enum Idx {
    Affine {
        var: Option<usize>,
        coef: i64,
        offset: i64,
    },
    Window {
        var: usize,
        win: usize,
    },
}

#[derive(Debug, Clone)]
struct CAccess {
    slot: usize,
    idx: Vec<Idx>,
    source: Source,
}

#[derive(Debug, Clone)]
enum CExpr {
    Const(f64),
    Read(usize),
    Unary(UnaryOp, Box<CExpr>),
    Binary(BinOp, Box<CExpr>, Box<CExpr>),
}

struct CStmt {
    einsum: EinsumId,
    group: usize,
    out: CAccess,
    accumulate: bool,
    body: CExpr,
    reads: Vec<CAccess>,
    init: Option<(CAccess, CExpr, Vec<CAccess>)>,
    gen: Option<usize>,
    ranks: Vec<usize>,
    write_back: bool,
}

/// Per-tensor execution state.
struct Slot {
    name: String,
    data: Dense,
    /// Updates received by each element.
    updates: Option<Vec<u32>>,
    complete_at: u32,
    first_write: Vec<u64>,
    last_read: Vec<u64>,
    tracked: bool,
}

struct Machine<'a> {
    c: &'a Cascade,
    slots: Vec<Slot>,
    values: Vec<i64>,
    bases: Vec<i64>,
    bound: Vec<bool>,
    epoch: u64,
    read_sets: HashMap<(usize, u32, usize), Vec<u64>>,
    write_sets: HashMap<(usize, usize), Vec<u64>>,
    trace: ExecutionTrace,
    fire_counts: Vec<u64>,
}

fn mark(bits: &mut Vec<u64>, n: usize, k: usize) {
    if bits.is_empty() {
        bits.resize(n.div_ceil(64), 0);
    }
    bits[k / 64] |= 1 << (k % 64);
}

impl<'a> Machine<'a> {
    fn rank_pos(&self, name: &str) -> Result<usize> {
        self.c
            .ranks
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Exec(format!("unknown rank {name}")))
    }

    fn slot_of(&self, tensor: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.name == tensor)
            .ok_or_else(|| Error::Exec(format!("tensor {tensor} has no storage")))
    }

    fn access(&self, a: &crate::ir::Access, source: Source) -> Result<CAccess> {
        let slot = self.slot_of(&a.tensor)?;
        let mut idx = Vec::new();
        for i in &a.indices {
            idx.push(match i {
                IndexExpr::Affine { var, coef, offset } => Idx::Affine {
                    var: var.as_ref().map(|v| self.rank_pos(v)).transpose()?,
                    coef: *coef,
                    offset: *offset,
                },
                IndexExpr::Window { var, window } => Idx::Window {
                    var: self.rank_pos(var)?,
                    win: self.rank_pos(window)?,
                },
            });
        }
        Ok(CAccess { slot, idx, source })
    }

    fn expr(&self, e: &Expr, sources: &[Source], reads: &mut Vec<CAccess>) -> Result<CExpr> {
        Ok(match e {
            Expr::Const(v) => CExpr::Const(*v),
            Expr::Access(a) => {
                let src = sources
                    .get(reads.len())
                    .copied()
                    .unwrap_or(Source::Backing { pass: 0 });
                reads.push(self.access(a, src)?);
                CExpr::Read(reads.len() - 1)
            }
            Expr::Unary(op, x) => CExpr::Unary(*op, Box::new(self.expr(x, sources, reads)?)),
            Expr::Binary(op, l, r) => {
                let l = self.expr(l, sources, reads)?;
                CExpr::Binary(*op, Box::new(l), Box::new(self.expr(r, sources, reads)?))
            }
        })
    }

    fn compile(&self, s: &Compute) -> Result<CStmt> {
        let e: &EinsumDecl = self
            .c
            .einsum(s.einsum)
            .ok_or_else(|| Error::Exec(format!("unknown Einsum {}", s.einsum)))?;
        let mut reads = Vec::new();
        let body = self.expr(&e.body, &s.reads, &mut reads)?;
        let init = match &e.init {
            None => None,
            Some(i) => {
                let mut ir = Vec::new();
                let ib = self.expr(&i.body, &s.init_reads, &mut ir)?;
                Some((self.access(&i.output, Source::Backing { pass: 0 })?, ib, ir))
            }
        };
        let gen = self
            .c
            .generational_rank(e)
            .map(|g| self.rank_pos(&g.name))
            .transpose()?;
        let ranks = e
            .rank_names()
            .iter()
            .map(|r| self.rank_pos(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(CStmt {
            einsum: e.id,
            group: s.group,
            out: self.access(&e.output, Source::Backing { pass: 0 })?,
            accumulate: e.accumulate,
            body,
            reads,
            init,
            gen,
            ranks,
            write_back: s.write_back,
        })
    }

    /// Element offset, `None` for a window read that falls outside the tensor.
    fn locate(&self, a: &CAccess) -> Result<Option<usize>> {
        let shape = &self.slots[a.slot].data.shape;
        let mut off = 0usize;
        for (d, i) in a.idx.iter().enumerate() {
            let (v, window) = match i {
                Idx::Affine { var, coef, offset } => {
                    (var.map_or(0, |p| coef * self.values[p]) + offset, false)
                }
                Idx::Window { var, win } => (self.values[*var] - self.values[*win], true),
            };
            if v < 0 || v as usize >= shape[d] {
                if window {
                    return Ok(None);
                }
                return Err(Error::Exec(format!(
                    "index {v} out of range 0..{} on axis {d} of {}",
                    shape[d], self.slots[a.slot].name
                )));
            }
            off = off * shape[d] + v as usize;
        }
        Ok(Some(off))
    }

    fn read(&mut self, a: &CAccess, group: usize) -> Result<f64> {
        let Some(off) = self.locate(a)? else {
            return Ok(0.0);
        };
        let epoch = self.epoch;
        let s = &mut self.slots[a.slot];
        if let Some(u) = &s.updates {
            if u[off] == 0 {
                return Err(Error::Exec(format!(
                    "{} element {off} read before it was written",
                    s.name
                )));
            }
            if u[off] < s.complete_at {
                return Err(Error::Exec(format!(
                    "{} element {off} read after {} of {} reduction updates",
                    s.name, u[off], s.complete_at
                )));
            }
        }
        match a.source {
            Source::OnChip => {
                if s.tracked {
                    s.last_read[off] = epoch;
                }
            }
            Source::Backing { pass } => {
                let n = s.data.data.len();
                mark(
                    self.read_sets.entry((group, pass, a.slot)).or_default(),
                    n,
                    off,
                );
            }
        }
        Ok(self.slots[a.slot].data.data[off])
    }

    fn eval(&mut self, e: &CExpr, reads: &[CAccess], group: usize) -> Result<f64> {
        Ok(match e {
            CExpr::Const(v) => *v,
            CExpr::Read(k) => self.read(&reads[*k], group)?,
            CExpr::Unary(op, x) => op.apply(self.eval(x, reads, group)?),
            CExpr::Binary(op, l, r) => {
                let a = self.eval(l, reads, group)?;
                op.apply(a, self.eval(r, reads, group)?)
            }
        })
    }

    fn write(
        &mut self,
        a: &CAccess,
        v: f64,
        accumulate: bool,
        write_back: bool,
        group: usize,
    ) -> Result<()> {
        let off = self
            .locate(a)?
            .ok_or_else(|| Error::Exec("write through a window".into()))?;
        self.epoch += 1;
        let epoch = self.epoch;
        let s = &mut self.slots[a.slot];
        if let Some(u) = &mut s.updates {
            u[off] += 1;
        }
        if s.tracked && s.first_write[off] == u64::MAX {
            s.first_write[off] = epoch;
        }
        let x = &mut s.data.data[off];
        *x = if accumulate { *x + v } else { v };
        if write_back {
            let n = s.data.data.len();
            mark(self.write_sets.entry((group, a.slot)).or_default(), n, off);
        }
        Ok(())
    }

    fn exec(&mut self, st: &CStmt) -> Result<()> {
        for r in &st.ranks {
            if !self.bound[*r] {
                return Err(Error::Exec(format!(
                    "E{} runs outside a loop over rank {}",
                    st.einsum, self.c.ranks[*r].name
                )));
            }
        }
        *self.trace.visits.entry(st.einsum).or_default() += 1;
        let at_start = st.gen.is_some_and(|g| self.values[g] == 0);
        match (&st.init, at_start) {
            (Some((out, body, reads)), true) => {
                let v = self.eval(body, reads, st.group)?;
                self.write(out, v, false, st.write_back, st.group)
            }
            _ => {
                let v = self.eval(&st.body, &st.reads, st.group)?;
                self.write(&st.out, v, st.accumulate, st.write_back, st.group)
            }
        }
    }

    fn trigger(&mut self, t: &TriggerSpec) -> Result<()> {
        let slot = self.slot_of(&t.tensor)?;
        let decl = self
            .c
            .tensor(&t.tensor)
            .ok_or_else(|| Error::Exec(format!("unknown tensor {}", t.tensor)))?;
        let shape = self.slots[slot].data.shape.clone();
        // Every element of the watched tile must be final.
        let mut idx: Vec<Option<usize>> = Vec::new();
        for r in &decl.ranks {
            if t.tile_ranks.contains(r) {
                idx.push(None);
            } else {
                let p = self.rank_pos(r)?;
                idx.push(Some(self.values[p] as usize));
            }
        }
        let s = &self.slots[slot];
        if let Some(u) = &s.updates {
            let free: Vec<usize> = (0..idx.len()).filter(|d| idx[*d].is_none()).collect();
            let count: usize = free.iter().map(|d| shape[*d]).product();
            for k in 0..count {
                let mut rem = k;
                let mut full = vec![0usize; idx.len()];
                for d in free.iter().rev() {
                    full[*d] = rem % shape[*d];
                    rem /= shape[*d];
                }
                for (d, v) in idx.iter().enumerate() {
                    if let Some(v) = v {
                        full[d] = *v;
                    }
                }
                let off = s.data.offset(&full);
                if u[off] != s.complete_at {
                    return Err(Error::Exec(format!(
                        "trigger on {} fired with element {full:?} at {} of {} updates",
                        t.tensor, u[off], s.complete_at
                    )));
                }
            }
        }
        Ok(())
    }

    fn walk(&mut self, nodes: &[CNode]) -> Result<()> {
        for n in nodes {
            match n {
                CNode::Stmt(st) => self.exec(st)?,
                CNode::Trigger(k, t) => {
                    self.trigger(t)?;
                    self.fire_counts[*k] += 1;
                }
                CNode::Loop {
                    rank,
                    trip,
                    stride,
                    part,
                    body,
                } => {
                    let p = *rank;
                    let (saved_v, saved_b, saved_bound) =
                        (self.values[p], self.bases[p], self.bound[p]);
                    let (lo, hi, step) = match part {
                        LoopPart::Full => (0, *trip, 1),
                        LoopPart::TileOuter { tile } => (0, *trip, (*tile).max(1) as i64),
                        LoopPart::TileInner { tile } => {
                            (self.bases[p], (self.bases[p] + *tile as i64).min(*trip), 1)
                        }
                    };
                    let mut k = lo;
                    while k < hi {
                        if let LoopPart::TileOuter { .. } = part {
                            self.bases[p] = k;
                        } else {
                            self.values[p] = k * stride;
                            self.bound[p] = true;
                        }
                        self.walk(body)?;
                        k += step;
                    }
                    self.values[p] = saved_v;
                    self.bases[p] = saved_b;
                    self.bound[p] = saved_bound;
                }
            }
        }
        Ok(())
    }

    fn compile_nodes(&self, nodes: &[Node], triggers: &mut usize) -> Result<Vec<CNode>> {
        let mut out = Vec::new();
        for n in nodes {
            out.push(match n {
                Node::Compute(s) => CNode::Stmt(self.compile(s)?),
                Node::Trigger(t) => {
                    *triggers += 1;
                    CNode::Trigger(*triggers - 1, t.clone())
                }
                Node::Loop { spec, body } => CNode::Loop {
                    rank: self.rank_pos(&spec.rank)?,
                    trip: spec.trip as i64,
                    stride: spec.stride.max(1) as i64,
                    part: spec.part,
                    body: self.compile_nodes(body, triggers)?,
                },
            });
        }
        Ok(out)
    }
}

enum CNode {
    Loop {
        rank: usize,
        trip: i64,
        stride: i64,
        part: LoopPart,
        body: Vec<CNode>,
    },
    Stmt(CStmt),
    Trigger(usize, TriggerSpec),
}

/// Executes `nest` on the inputs in `store`. Intermediates and outputs are
/// added to the returned store.
pub fn run(
    nest: &LoopNest,
    c: &Cascade,
    store: &TensorStore,
) -> Result<(TensorStore, ExecutionTrace)> {
    let tracked: std::collections::BTreeSet<String> = nest
        .computes()
        .iter()
        .flat_map(|s| {
            let e = c.einsum(s.einsum);
            let body: Vec<(String, Source)> = e
                .map(|e| {
                    let inits = e
                        .init
                        .iter()
                        .flat_map(|i| i.body.accesses())
                        .zip(s.init_reads.iter());
                    e.body
                        .accesses()
                        .into_iter()
                        .zip(s.reads.iter())
                        .chain(inits)
                        .map(|(a, src)| (a.tensor.clone(), *src))
                        .collect()
                })
                .unwrap_or_default();
            body
        })
        .filter(|(_, src)| *src == Source::OnChip)
        .map(|(t, _)| t)
        .collect();

    let mut slots = Vec::new();
    for t in &c.tensors {
        let shape = c.shape(&t.name);
        let produced = c.producer(&t.name).map(|p| &c.einsums[p]);
        let data = match produced {
            None => store
                .get(&t.name)
                .cloned()
                .ok_or_else(|| Error::Exec(format!("input {} missing from the store", t.name)))?,
            Some(_) => Dense::zeros(&shape),
        };
        if data.shape != shape {
            return Err(Error::Exec(format!(
                "{} has shape {:?}, expected {shape:?}",
                t.name, data.shape
            )));
        }
        let n = data.data.len();
        let complete_at = produced
            .map(|e| {
                e.reduction_ranks
                    .iter()
                    .map(|r| c.rank(r).map_or(1, |d| d.trip_count() as u32))
                    .product()
            })
            .unwrap_or(0);
        let on = tracked.contains(&t.name);
        slots.push(Slot {
            name: t.name.clone(),
            data,
            updates: produced.map(|_| vec![0u32; n]),
            complete_at,
            first_write: if on { vec![u64::MAX; n] } else { Vec::new() },
            last_read: if on { vec![0; n] } else { Vec::new() },
            tracked: on,
        });
    }
    let nr = c.ranks.len();
    let triggers = nest.triggers();
    let mut m = Machine {
        c,
        slots,
        values: vec![0; nr],
        bases: vec![0; nr],
        bound: vec![false; nr],
        epoch: 0,
        read_sets: HashMap::new(),
        write_sets: HashMap::new(),
        trace: ExecutionTrace::default(),
        fire_counts: vec![0; triggers.len()],
    };
    let program = m.compile_nodes(&nest.body, &mut 0)?;
    m.walk(&program)?;

    let mut trace = std::mem::take(&mut m.trace);
    for ((g, pass, slot), bits) in &m.read_sets {
        let n: u64 = bits.iter().map(|w| w.count_ones() as u64).sum();
        let name = m.slots[*slot].name.clone();
        *trace.reads.entry(name.clone()).or_default() += n;
        trace.scoped_reads.insert((*g, *pass, name), n);
    }
    for ((g, slot), bits) in &m.write_sets {
        let n: u64 = bits.iter().map(|w| w.count_ones() as u64).sum();
        let name = m.slots[*slot].name.clone();
        *trace.writes.entry(name.clone()).or_default() += n;
        trace.scoped_writes.insert((*g, name), n);
    }
    for s in &m.slots {
        if s.tracked {
            trace
                .itf
                .insert(s.name.clone(), max_overlap(&s.first_write, &s.last_read));
        }
        let bad = s.data.data.iter().filter(|x| !x.is_finite()).count() as u64;
        if bad > 0 {
            trace.nonfinite.insert(s.name.clone(), bad);
        }
    }
    for (k, t) in triggers.iter().enumerate() {
        trace.triggers.push(TriggerCount {
            tensor: t.tensor.clone(),
            consumer: t.consumer,
            fires: m.fire_counts[k],
            expected: t.expected_fires,
        });
    }

    let mut out = store.clone();
    for s in m.slots {
        out.tensors.insert(s.name, s.data);
    }
    Ok((out, trace))
}

/// Largest number of elements whose `[first write, last on-chip read]`
/// intervals overlap.
fn max_overlap(first: &[u64], last: &[u64]) -> u64 {
    let mut events: Vec<(u64, i64)> = Vec::new();
    for (w, r) in first.iter().zip(last) {
        if *w != u64::MAX && *r >= *w {
            events.push((*w, 1));
            events.push((*r, -1));
        }
    }
    // Starts sort before ends at the same epoch so touching intervals overlap.
    events.sort_by_key(|(t, d)| (*t, -*d));
    let (mut live, mut best) = (0i64, 0i64);
    for (_, d) in events {
        live += d;
        best = best.max(live);
    }
    best as u64
}

/// Runs on synthesized inputs and returns the largest live set of every
/// intermediate read on chip.
pub fn measure_itf(nest: &LoopNest, c: &Cascade) -> Result<BTreeMap<String, u64>> {
    let store = TensorStore::synthesize(c, 0);
    Ok(run(nest, c, &store)?.1.itf)
}

/// Largest elementwise `|a - b| / (|b| + 1e-300)` over the named tensors.
pub fn max_rel_error<'a>(
    a: &TensorStore,
    b: &TensorStore,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for n in names {
        let (x, y) = (a.get(n), b.get(n));
        let (Some(x), Some(y)) = (x, y) else {
            return Err(Error::Exec(format!("tensor {n} missing from a store")));
        };
        if x.shape != y.shape {
            return Err(Error::Exec(format!("{n} differs in shape")));
        }
        for (p, q) in x.data.iter().zip(&y.data) {
            let e = if p == q {
                0.0
            } else {
                (p - q).abs() / (q.abs() + 1e-300)
            };
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    Ok(worst)
}
