//! Loop-nest schedules: lowering of fusion groups, footprint analysis, a
//! static stationarity checker and a pseudocode printer.

mod analysis;
mod print;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{
    barriers, bridge_groups, order_ranks, unfused_groups, FusionGroup, Residency, ResidencyKind,
};
use crate::ir::{Cascade, EinsumDecl, EinsumId};

pub use analysis::{
    check_stationarity, footprints, statements, trigger_sites, LinkFootprint, StatementSite,
    TriggerSite, Violation,
};
pub use print::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LoopPart {
    Full,
    /// Steps over tiles of `tile` iterations.
    TileOuter {
        tile: usize,
    },
    /// Walks the iterations of the tile chosen by the enclosing outer loop.
    TileInner {
        tile: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LoopRole {
    /// Shared generational loop around groups that form a recurrence.
    Outer,
    /// Stationary for the whole group.
    Common,
    /// Stationary while the given segment executes.
    Segment(usize),
    Member,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loop {
    pub id: usize,
    pub rank: String,
    /// Iterations needed to cover the rank.
    pub trip: usize,
    pub stride: usize,
    pub part: LoopPart,
    pub role: LoopRole,
}

impl Loop {
    /// Iterations this loop contributes to the live set of a tensor it indexes.
    pub fn span(&self) -> usize {
        match self.part {
            LoopPart::TileInner { tile } => tile.min(self.trip),
            _ => self.trip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    OnChip,
    /// Read from the backing store; `pass` separates re-reads of the same tensor.
    Backing {
        pass: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Compute {
    pub stmt: usize,
    pub einsum: EinsumId,
    pub group: usize,
    /// One entry per body access, in evaluation order.
    pub reads: Vec<Source>,
    pub init_reads: Vec<Source>,
    /// The output is written to the backing store.
    pub write_back: bool,
    /// The output has an on-chip consumer in the group.
    pub on_chip: bool,
}

/// Starts downstream work once a tile of `tensor` has received its final update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerSpec {
    pub tensor: String,
    pub producer: EinsumId,
    pub consumer: EinsumId,
    pub group: usize,
    /// Ranks spanned in full by each watched tile.
    pub tile_ranks: Vec<String>,
    pub expected_fires: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Node {
    Loop { spec: Loop, body: Vec<Node> },
    Compute(Compute),
    Trigger(TriggerSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BufferLevel {
    RegisterUnit,
    OnChipTile,
    BackingStore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Buffer {
    pub tensor: String,
    pub group: usize,
    pub level: BufferLevel,
    /// Elements simultaneously held on chip (0 for backing-store buffers).
    pub footprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSchedule {
    pub id: usize,
    pub members: Vec<EinsumId>,
    /// Ranks the lowering kept stationary for the whole group, outermost first.
    pub stationary: Vec<String>,
    /// Ranks of the loops enclosing every statement of the group, outermost first.
    pub prefix: Vec<String>,
    pub residency: BTreeMap<String, Residency>,
    /// Tensors moved to the backing store by the capacity check.
    pub demoted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopNest {
    pub body: Vec<Node>,
    pub groups: Vec<GroupSchedule>,
    pub buffers: Vec<Buffer>,
    pub warnings: Vec<String>,
}

impl LoopNest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("nest serializes")
    }

    pub fn group(&self, id: usize) -> Option<&GroupSchedule> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn computes(&self) -> Vec<&Compute> {
        fn walk<'a>(n: &'a [Node], out: &mut Vec<&'a Compute>) {
            for x in n {
                match x {
                    Node::Loop { body, .. } => walk(body, out),
                    Node::Compute(c) => out.push(c),
                    Node::Trigger(_) => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out
    }

    pub fn triggers(&self) -> Vec<&TriggerSpec> {
        fn walk<'a>(n: &'a [Node], out: &mut Vec<&'a TriggerSpec>) {
            for x in n {
                match x {
                    Node::Loop { body, .. } => walk(body, out),
                    Node::Trigger(t) => out.push(t),
                    Node::Compute(_) => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct LowerOptions {
    /// Tile size per rank; untiled ranks pass unit intermediates.
    pub tiles: BTreeMap<String, usize>,
    /// Outer loop order requested for every multi-member group.
    pub order: Option<Vec<String>>,
    /// Build the nest even when the requested order breaks stationarity.
    pub force: bool,
    /// On-chip bytes available to a group's intermediates.
    pub capacity_bytes: Option<u64>,
    pub element_bytes: u64,
}

impl LowerOptions {
    pub fn with_capacity(capacity: u64, element_bytes: u64) -> Self {
        LowerOptions {
            capacity_bytes: Some(capacity),
            element_bytes,
            ..Default::default()
        }
    }
}

/// Lowers a single fusion group on its own.
pub fn lower(group: &FusionGroup, c: &Cascade, opts: &LowerOptions) -> Result<LoopNest> {
    lower_plan(c, std::slice::from_ref(group), opts)
}

/// Bridges the given groups into fully fused groups, then lowers them.
pub fn lower_fully_fused(
    groups: &[FusionGroup],
    c: &Cascade,
    opts: &LowerOptions,
) -> Result<LoopNest> {
    lower_plan(c, &bridge_groups(c, groups), opts)
}

/// Each Einsum in its own loop nest, every tensor in the backing store.
pub fn unfused_schedule(c: &Cascade) -> LoopNest {
    lower_plan(c, &unfused_groups(c), &LowerOptions::default())
        .expect("unfused lowering cannot fail")
}

struct Open {
    spec: Loop,
    body: Vec<Node>,
}

struct Builder<'a> {
    c: &'a Cascade,
    opts: &'a LowerOptions,
    root: Vec<Node>,
    stack: Vec<Open>,
    next_loop: usize,
    next_stmt: usize,
    /// Loop ids open while each Einsum executed.
    paths: BTreeMap<EinsumId, Vec<usize>>,
    stationary: BTreeMap<usize, Vec<String>>,
}

impl<'a> Builder<'a> {
    fn decl(&self, id: EinsumId) -> &'a EinsumDecl {
        self.c.einsum(id).expect("member of the cascade")
    }

    fn emit(&mut self, n: Node) {
        match self.stack.last_mut() {
            Some(o) => o.body.push(n),
            None => self.root.push(n),
        }
    }

    fn push(&mut self, rank: &str, part: LoopPart, role: LoopRole) {
        let d = self.c.rank(rank).expect("declared rank");
        let spec = Loop {
            id: self.next_loop,
            rank: rank.to_string(),
            trip: d.trip_count(),
            stride: d.stride(),
            part,
            role,
        };
        self.next_loop += 1;
        self.stack.push(Open {
            spec,
            body: Vec::new(),
        });
    }

    fn pop(&mut self) {
        let o = self.stack.pop().expect("open loop");
        self.emit(Node::Loop {
            spec: o.spec,
            body: o.body,
        });
    }

    fn pop_to(&mut self, len: usize) {
        while self.stack.len() > len {
            self.pop();
        }
    }

    /// Ranks with an open loop that binds a value (not just a tile).
    fn bound(&self) -> BTreeSet<String> {
        self.stack
            .iter()
            .filter(|o| !matches!(o.spec.part, LoopPart::TileOuter { .. }))
            .map(|o| o.spec.rank.clone())
            .collect()
    }

    fn tile_outer_open(&self, rank: &str) -> Option<usize> {
        self.stack.iter().find_map(|o| match o.spec.part {
            LoopPart::TileOuter { tile } if o.spec.rank == rank => Some(tile),
            _ => None,
        })
    }

    /// Pops from the first loop that `offends`; protected loops may only go when forced.
    fn pop_offending(
        &mut self,
        offends: impl Fn(&Loop) -> bool,
        protected: impl Fn(&Loop) -> bool,
    ) -> Result<()> {
        let Some(k) = self.stack.iter().position(|o| offends(&o.spec)) else {
            return Ok(());
        };
        if !self.opts.force {
            if let Some(p) = self.stack[k..].iter().find(|o| protected(&o.spec)) {
                let culprit = self.stack[k].spec.rank.clone();
                return Err(Error::Lowering {
                    rank: culprit.clone(),
                    message: format!(
                        "stationary loop {} must stay open but rank {culprit} has to close first",
                        p.spec.rank
                    ),
                });
            }
        }
        self.pop_to(k);
        Ok(())
    }

    fn push_rank(&mut self, rank: &str, role: LoopRole) {
        let part = match self.tile_outer_open(rank) {
            Some(tile) => LoopPart::TileInner { tile },
            None => LoopPart::Full,
        };
        self.push(rank, part, role);
    }

    fn group(&mut self, g: &FusionGroup) -> Result<()> {
        let c = self.c;
        let base = self.stack.len();
        let is: BTreeSet<String> = g
            .members
            .iter()
            .flat_map(|m| self.decl(*m).rank_names())
            .collect();
        let open = self.bound();

        // Outer loops shared by the group.
        let mut prefix: Vec<(String, LoopRole)> = Vec::new();
        let single = g.members.len() == 1;
        match &self.opts.order {
            Some(order) if !single => {
                let reduced: BTreeSet<&String> = g
                    .members
                    .iter()
                    .enumerate()
                    .filter(|(k, m)| {
                        let t = self.decl(**m).output_tensor();
                        g.members[k + 1..]
                            .iter()
                            .any(|d| self.decl(*d).reads().contains(t))
                    })
                    .flat_map(|(_, m)| self.decl(*m).reduction_ranks.iter())
                    .collect();
                for r in order {
                    if reduced.contains(r) && !self.opts.force {
                        return Err(Error::Lowering {
                            rank: r.clone(),
                            message: format!(
                                "rank {r} is reduced inside the group and cannot be stationary"
                            ),
                        });
                    }
                    if is.contains(r) {
                        prefix.push((r.clone(), LoopRole::Common));
                    }
                }
            }
            _ => {
                let common: Vec<String> = if single {
                    let mut v = order_ranks(c, &g.stationary);
                    v.sort_by_key(|r| !c.rank(r).is_some_and(|d| d.is_generational()));
                    v
                } else {
                    g.stationary.clone()
                };
                for r in &common {
                    prefix.push((r.clone(), LoopRole::Common));
                }
                if let Some(s0) = g.segments.first().filter(|_| !single) {
                    for r in &s0.stationary {
                        if !common.contains(r) {
                            prefix.push((r.clone(), LoopRole::Segment(0)));
                        }
                    }
                }
            }
        }
        self.stationary.insert(
            g.id,
            prefix
                .iter()
                .filter(|(r, role)| *role == LoopRole::Common && !open.contains(r))
                .map(|(r, _)| r.clone())
                .collect(),
        );
        for (r, _) in &prefix {
            if self.opts.tiles.contains_key(r) && !is.contains(r) {
                return Err(Error::Lowering {
                    rank: r.clone(),
                    message: format!("tile given for rank {r} absent from the group"),
                });
            }
        }
        for (r, role) in &prefix {
            if open.contains(r) {
                continue;
            }
            match self.opts.tiles.get(r) {
                Some(&t) if !single => self.push(r, LoopPart::TileOuter { tile: t.max(1) }, *role),
                _ => self.push(r, LoopPart::Full, *role),
            }
        }
        if !single {
            for (r, t) in &self.opts.tiles {
                if is.contains(r) && !prefix.iter().any(|(p, _)| p == r) && !open.contains(r) {
                    self.push(
                        r,
                        LoopPart::TileOuter { tile: (*t).max(1) },
                        LoopRole::Common,
                    );
                }
            }
        }

        let mut seg = 0usize;
        let mut triggered: BTreeSet<String> = BTreeSet::new();
        for (k, m) in g.members.iter().enumerate() {
            let e = self.decl(*m);
            let my_seg = g.segment_of(*m);
            let entering = my_seg != seg;
            seg = my_seg;
            let ranks = e.rank_names();

            // Loops that must close before `e` may read its in-group inputs.
            let mut blocking: BTreeSet<usize> = BTreeSet::new();
            for t in e.reads() {
                let Some(p) = g.members[..k]
                    .iter()
                    .find(|x| self.decl(**x).output_tensor() == t)
                else {
                    continue;
                };
                let pd = self.decl(*p);
                if let Some(path) = self.paths.get(p) {
                    for lid in path {
                        if let Some(o) = self.stack.iter().find(|o| o.spec.id == *lid) {
                            if pd.reduction_ranks.contains(&o.spec.rank) {
                                blocking.insert(*lid);
                            }
                        }
                    }
                }
            }
            let protected = |l: &Loop| match l.role {
                LoopRole::Outer | LoopRole::Common => true,
                LoopRole::Segment(s) => s == seg,
                LoopRole::Member => false,
            };
            self.pop_offending(
                |l| {
                    matches!(l.part, LoopPart::TileInner { .. })
                        || !ranks.contains(&l.rank)
                        || blocking.contains(&l.id)
                },
                protected,
            )?;

            if entering {
                let produced_before: Vec<EinsumId> = g.members[..k]
                    .iter()
                    .copied()
                    .filter(|x| g.segment_of(*x) < seg)
                    .collect();
                let mut watch: Vec<(String, EinsumId, EinsumId)> = Vec::new();
                for d in g.members[k..].iter().filter(|d| g.segment_of(**d) == seg) {
                    for t in self.decl(*d).reads() {
                        if let Some(p) = produced_before
                            .iter()
                            .find(|p| self.decl(**p).output_tensor() == t)
                        {
                            if triggered.insert(t.to_string()) {
                                watch.push((t.to_string(), *p, *d));
                            }
                        }
                    }
                }
                for (t, p, _) in &watch {
                    let sig: BTreeSet<String> = c
                        .tensor(t)
                        .map(|d| d.ranks.iter().cloned().collect())
                        .unwrap_or_default();
                    let pd = self.decl(*p);
                    let path = self.paths.get(p).cloned().unwrap_or_default();
                    self.pop_offending(
                        |l| {
                            !sig.contains(&l.rank)
                                || (path.contains(&l.id) && pd.reduction_ranks.contains(&l.rank))
                        },
                        protected,
                    )?;
                }
                // The segment's own stationary loops will open below whatever the
                // bridge keeps open. A kept loop over a rank the segment reduces
                // before an in-group read would then have to close first.
                let bound = self.bound();
                if g.segments[seg]
                    .stationary
                    .iter()
                    .any(|r| !bound.contains(r))
                {
                    let seg_members: Vec<EinsumId> = g.members[k..]
                        .iter()
                        .copied()
                        .filter(|d| g.segment_of(*d) == seg)
                        .collect();
                    let reduced_then_read: BTreeSet<String> = seg_members
                        .iter()
                        .filter(|p| {
                            let t = self.decl(**p).output_tensor();
                            g.members.iter().any(|d| {
                                g.segment_of(*d) >= seg && self.decl(*d).reads().contains(t)
                            })
                        })
                        .flat_map(|p| self.decl(*p).reduction_ranks.iter().cloned())
                        .collect();
                    self.pop_offending(|l| reduced_then_read.contains(&l.rank), protected)?;
                }
                let bound = self.bound();
                for (t, p, d) in watch {
                    let sig = c.tensor(&t).map(|d| d.ranks.clone()).unwrap_or_default();
                    let tile_ranks: Vec<String> = sig
                        .iter()
                        .filter(|r| !bound.contains(*r))
                        .cloned()
                        .collect();
                    let tile: u64 = tile_ranks.iter().map(|r| c.rank_shape(r) as u64).product();
                    self.emit(Node::Trigger(TriggerSpec {
                        tensor: t.clone(),
                        producer: p,
                        consumer: d,
                        group: g.id,
                        tile_ranks,
                        expected_fires: c.size(&t) / tile.max(1),
                    }));
                }
                let bound = self.bound();
                for r in &g.segments[seg].stationary {
                    if !bound.contains(r) && ranks.contains(r) {
                        self.push_rank(r, LoopRole::Segment(seg));
                    }
                }
            }

            // Remaining ranks: generational, shared with the next member, outputs, reductions.
            let bound = self.bound();
            let missing: Vec<String> = e
                .ordered_ranks()
                .into_iter()
                .filter(|r| !bound.contains(r))
                .collect();
            let next: BTreeSet<String> = g
                .members
                .get(k + 1)
                .map(|n| self.decl(*n).rank_names())
                .unwrap_or_default();
            let outs: BTreeSet<&str> = e.output.ranks().collect();
            let mut order = missing.clone();
            order.sort_by_key(|r| {
                let gen = c.rank(r).is_some_and(|d| d.is_generational());
                let class = if gen {
                    0
                } else if next.contains(r)
                    && (outs.contains(r.as_str()) || !e.reduction_ranks.contains(r))
                {
                    1
                } else if outs.contains(r.as_str()) {
                    2
                } else {
                    3
                };
                let pos = if class == 3 {
                    missing.iter().position(|x| x == r).unwrap_or(0)
                } else {
                    c.rank_order(r)
                };
                (class, pos)
            });
            for r in &order {
                self.push_rank(r, LoopRole::Member);
            }
            self.paths
                .insert(*m, self.stack.iter().map(|o| o.spec.id).collect());
            let stmt = self.next_stmt;
            self.next_stmt += 1;
            self.emit(Node::Compute(Compute {
                stmt,
                einsum: *m,
                group: g.id,
                reads: Vec::new(),
                init_reads: Vec::new(),
                write_back: false,
                on_chip: false,
            }));
        }
        self.pop_to(base);
        Ok(())
    }
}

/// Groups `[a, b]` whose members read an earlier generation of a tensor produced
/// in a later group of the range; they share one generational loop.
fn recurrence_ranges(c: &Cascade, groups: &[FusionGroup]) -> Vec<(usize, usize, String)> {
    let mut ranges: Vec<(usize, usize, String)> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for m in &g.members {
            let e = c.einsum(*m).expect("member");
            let Some(gr) = c.generational_rank(e) else {
                continue;
            };
            for a in e.back_reads(&gr.name) {
                let Some(p) = c.producer(&a.tensor) else {
                    continue;
                };
                let pid = c.einsums[p].id;
                if let Some(gj) = groups.iter().position(|x| x.contains(pid)) {
                    if gj > gi {
                        ranges.push((gi, gj, gr.name.clone()));
                    }
                }
            }
        }
    }
    ranges.sort();
    let mut merged: Vec<(usize, usize, String)> = Vec::new();
    for r in ranges {
        match merged.last_mut() {
            Some(last) if r.0 <= last.1 => last.1 = last.1.max(r.1),
            _ => merged.push(r),
        }
    }
    merged
}

/// Lowers a whole plan into one nest, groups in order.
pub fn lower_plan(c: &Cascade, groups: &[FusionGroup], opts: &LowerOptions) -> Result<LoopNest> {
    let mut b = Builder {
        c,
        opts,
        root: Vec::new(),
        stack: Vec::new(),
        next_loop: 0,
        next_stmt: 0,
        paths: BTreeMap::new(),
        stationary: BTreeMap::new(),
    };
    let ranges = recurrence_ranges(c, groups);
    for (gi, g) in groups.iter().enumerate() {
        if let Some((_, _, rank)) = ranges.iter().find(|r| r.0 == gi) {
            b.push(rank, LoopPart::Full, LoopRole::Outer);
        }
        b.group(g)?;
        if ranges.iter().any(|r| r.1 == gi) {
            b.pop_to(0);
        }
    }
    b.pop_to(0);

    let stationary = b.stationary;
    let mut nest = LoopNest {
        body: b.root,
        groups: Vec::new(),
        buffers: Vec::new(),
        warnings: Vec::new(),
    };
    finalize(c, groups, opts, &stationary, &mut nest);
    Ok(nest)
}

/// Where `consumer` reads `tensor` from under the given residency.
pub fn link_source(
    c: &Cascade,
    g: &FusionGroup,
    kind: Option<&ResidencyKind>,
    consumer: EinsumId,
    tensor: &str,
) -> Source {
    let Some(p) = c.producer(tensor).map(|i| c.einsums[i].id) else {
        return Source::Backing { pass: 0 };
    };
    if !g.contains(p) {
        return Source::Backing { pass: 0 };
    }
    let k = barriers(c, g, p, consumer, tensor);
    let forward =
        g.members.iter().position(|m| *m == p) < g.members.iter().position(|m| *m == consumer);
    match kind {
        Some(ResidencyKind::OnChipUnit) | Some(ResidencyKind::OnChipTile { .. }) => Source::OnChip,
        Some(ResidencyKind::MultiPass { .. }) if k == 0 => Source::OnChip,
        Some(ResidencyKind::Spilled { trigger: true })
            if k == 0 && forward && g.segment_of(p) == g.segment_of(consumer) =>
        {
            Source::OnChip
        }
        _ => Source::Backing { pass: k },
    }
}

/// Settles residency from the measured footprints, applies the capacity check
/// and fills in read sources.
fn finalize(
    c: &Cascade,
    groups: &[FusionGroup],
    opts: &LowerOptions,
    stationary: &BTreeMap<usize, Vec<String>>,
    nest: &mut LoopNest,
) {
    let sites = statements(nest);
    let links = footprints(c, groups, &sites);
    let mut warnings = Vec::new();
    for g in groups {
        let mut res = g.residency.clone();
        let mut demoted: Vec<String> = Vec::new();
        // Elements each tensor holds on chip, over the links read on chip.
        let mut need: BTreeMap<String, (u64, Vec<(String, usize)>)> = BTreeMap::new();
        for l in links.iter().filter(|l| l.group == g.id) {
            if link_source(
                c,
                g,
                res.get(&l.tensor).map(|r| &r.kind),
                l.consumer,
                &l.tensor,
            ) != Source::OnChip
            {
                continue;
            }
            let e = need.entry(l.tensor.clone()).or_insert((0, Vec::new()));
            if l.elements > e.0 {
                *e = (l.elements, l.extents.clone());
            }
        }
        for (t, (n, ext)) in &need {
            if let Some(r) = res.get_mut(t) {
                if *n > 1 && matches!(r.kind, ResidencyKind::OnChipUnit) {
                    r.kind = ResidencyKind::OnChipTile {
                        extents: ext.clone(),
                    };
                }
            }
        }
        if let Some(cap) = opts.capacity_bytes {
            let width = opts.element_bytes.max(1);
            let bytes = |demoted: &[String]| -> u64 {
                need.iter()
                    .filter(|(t, _)| !demoted.contains(t))
                    .map(|(_, (n, _))| n * width)
                    .sum()
            };
            for m in &g.members {
                if bytes(&demoted) <= cap {
                    break;
                }
                let t = c.einsum(*m).expect("member").output.tensor.clone();
                if need.contains_key(&t) {
                    res.get_mut(&t).expect("produced in group").kind =
                        ResidencyKind::Spilled { trigger: false };
                    warnings.push(format!(
                        "group {}: {t} needs {} bytes on chip; spilled to the backing store",
                        g.id,
                        need[&t].0 * width
                    ));
                    demoted.push(t);
                }
            }
        }
        for t in res.keys() {
            let held = need.get(t).filter(|_| !demoted.contains(t)).map(|x| x.0);
            let (level, footprint) = match held {
                None => (BufferLevel::BackingStore, 0),
                Some(1) => (BufferLevel::RegisterUnit, 1),
                Some(n) => (BufferLevel::OnChipTile, n),
            };
            nest.buffers.push(Buffer {
                tensor: t.clone(),
                group: g.id,
                level,
                footprint,
            });
        }
        let prefix = first_loops(nest, g.id);
        nest.groups.push(GroupSchedule {
            id: g.id,
            members: g.members.clone(),
            stationary: stationary.get(&g.id).cloned().unwrap_or_default(),
            prefix,
            residency: res,
            demoted,
        });
    }
    for gp in groups.iter().filter_map(|g| g.generational.as_ref()) {
        warnings.extend(gp.warnings.iter().cloned());
    }
    let scheds = nest.groups.clone();
    fill_sources(c, groups, &scheds, &mut nest.body);
    nest.warnings = warnings;
}

/// Ranks of the loops shared by every statement of a group, outermost first.
fn first_loops(nest: &LoopNest, group: usize) -> Vec<String> {
    let sites = statements(nest);
    let paths: Vec<&Vec<Loop>> = sites
        .iter()
        .filter(|s| s.compute.group == group)
        .map(|s| &s.path)
        .collect();
    let Some(first) = paths.first() else {
        return Vec::new();
    };
    let mut n = first.len();
    for p in &paths[1..] {
        n = n.min(
            first
                .iter()
                .zip(p.iter())
                .take_while(|(a, b)| a.id == b.id)
                .count(),
        );
    }
    first[..n]
        .iter()
        .filter(|l| l.role != LoopRole::Outer)
        .map(|l| l.rank.clone())
        .collect()
}

fn fill_sources(c: &Cascade, groups: &[FusionGroup], scheds: &[GroupSchedule], body: &mut [Node]) {
    for n in body.iter_mut() {
        match n {
            Node::Loop { body, .. } => fill_sources(c, groups, scheds, body),
            Node::Trigger(_) => {}
            Node::Compute(stmt) => {
                let g = groups.iter().find(|g| g.id == stmt.group).expect("group");
                let res = &scheds
                    .iter()
                    .find(|s| s.id == g.id)
                    .expect("schedule")
                    .residency;
                let e = c.einsum(stmt.einsum).expect("einsum");
                let source =
                    |t: &str| link_source(c, g, res.get(t).map(|r| &r.kind), stmt.einsum, t);
                stmt.reads = e
                    .body
                    .accesses()
                    .iter()
                    .map(|a| source(&a.tensor))
                    .collect();
                stmt.init_reads = e
                    .init
                    .as_ref()
                    .map(|i| {
                        i.body
                            .accesses()
                            .iter()
                            .map(|a| source(&a.tensor))
                            .collect()
                    })
                    .unwrap_or_default();
                let out = res.get(e.output_tensor());
                stmt.write_back = out.is_none_or(|r| {
                    r.exported
                        || !matches!(
                            r.kind,
                            ResidencyKind::OnChipUnit | ResidencyKind::OnChipTile { .. }
                        )
                });
                let t = e.output_tensor();
                let kind = res.get(t).map(|r| &r.kind);
                stmt.on_chip = g.members.iter().any(|d| {
                    c.einsum(*d).is_some_and(|x| x.reads().contains(t))
                        && link_source(c, g, kind, *d, t) == Source::OnChip
                });
            }
        }
    }
}
