//! Pairwise fusion classification and greedy stitching of cascades into
//! fusion groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{Cascade, EinsumDecl, EinsumId};

pub type RankSet = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FusionClass {
    RI,
    RSb,
    RSp,
    RD,
    NotAdjacent,
}

impl fmt::Display for FusionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionClass::RI => "RI",
            FusionClass::RSb => "RSb",
            FusionClass::RSp => "RSp",
            FusionClass::RD => "RD",
            FusionClass::NotAdjacent => "not-adjacent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum StitchPolicy {
    RIOnly,
    RiRsb,
    RiRsbRsp,
    FullyFused,
}

impl StitchPolicy {
    pub const ALL: [StitchPolicy; 4] = [
        StitchPolicy::RIOnly,
        StitchPolicy::RiRsb,
        StitchPolicy::RiRsbRsp,
        StitchPolicy::FullyFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StitchPolicy::RIOnly => "ri",
            StitchPolicy::RiRsb => "ri-rsb",
            StitchPolicy::RiRsbRsp => "ri-rsb-rsp",
            StitchPolicy::FullyFused => "fully-fused",
        }
    }

    /// Pair classes that may join a group after the seed.
    pub fn admits(self, class: FusionClass) -> bool {
        match class {
            FusionClass::RI => true,
            FusionClass::RSb => self >= StitchPolicy::RiRsb,
            FusionClass::RSp => self >= StitchPolicy::RiRsbRsp,
            FusionClass::RD | FusionClass::NotAdjacent => false,
        }
    }

    /// Seed pairs: the two weaker policies only open a group on a class they admit.
    fn admits_seed(self, class: FusionClass) -> bool {
        match self {
            StitchPolicy::RIOnly | StitchPolicy::RiRsb => self.admits(class),
            StitchPolicy::RiRsbRsp | StitchPolicy::FullyFused => class != FusionClass::NotAdjacent,
        }
    }

    /// The intersection-chain test: how the new intersection may relate to the previous one.
    pub fn chain_allows(self, prev: &RankSet, curr: &RankSet) -> bool {
        if curr == prev {
            return true;
        }
        if self >= StitchPolicy::RiRsb && curr.is_subset(prev) {
            return true;
        }
        self >= StitchPolicy::RiRsbRsp && curr.is_superset(prev)
    }
}

impl fmt::Display for StitchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StitchPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ri" | "ri-only" => Ok(StitchPolicy::RIOnly),
            "ri-rsb" => Ok(StitchPolicy::RiRsb),
            "ri-rsb-rsp" => Ok(StitchPolicy::RiRsbRsp),
            "fully-fused" | "ff" => Ok(StitchPolicy::FullyFused),
            _ => Err(Error::Config(format!("unknown stitch policy `{s}`"))),
        }
    }
}

/// Iteration space of an Einsum as a set of rank names.
pub fn iteration_ranks(e: &EinsumDecl) -> RankSet {
    e.rank_names()
}

/// Set comparison of two iteration spaces, ignoring adjacency.
pub fn relation(up: &RankSet, dwn: &RankSet) -> FusionClass {
    if up == dwn {
        FusionClass::RI
    } else if up.is_superset(dwn) {
        FusionClass::RSb
    } else if up.is_subset(dwn) {
        FusionClass::RSp
    } else {
        FusionClass::RD
    }
}

/// True when `dwn` reads the output of `up`.
pub fn is_adjacent(up: &EinsumDecl, dwn: &EinsumDecl) -> bool {
    dwn.reads().contains(up.output_tensor())
}

pub fn classify_pair(up: &EinsumDecl, dwn: &EinsumDecl, _cascade: &Cascade) -> FusionClass {
    if !is_adjacent(up, dwn) {
        return FusionClass::NotAdjacent;
    }
    relation(&iteration_ranks(up), &iteration_ranks(dwn))
}

/// A seed pair must exchange a tensor directly or read a common intermediate.
fn seed_connected(a: &EinsumDecl, b: &EinsumDecl, c: &Cascade) -> bool {
    if is_adjacent(a, b) {
        return true;
    }
    let ra = a.reads();
    b.reads().iter().any(|t| ra.contains(t) && !c.is_input(t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub up: EinsumId,
    pub dwn: EinsumId,
    pub class: FusionClass,
}

/// A run of Einsums admitted by the intersection chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub members: Vec<EinsumId>,
    pub links: Vec<Link>,
    /// `I_prev` after each admission, starting with the seed intersection.
    pub chain: Vec<RankSet>,
    pub stationary: Vec<String>,
}

/// Boundary between two segments of a fully fused group, crossed through the
/// backing store with a trigger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bridge {
    pub after_segment: usize,
    pub link: Link,
    /// Tensors produced before the boundary and read after it.
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ResidencyKind {
    OnChipUnit,
    OnChipTile {
        extents: Vec<(String, usize)>,
    },
    /// Every consumer reads the tensor back from the backing store.
    Spilled {
        trigger: bool,
    },
    MultiPass {
        passes: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residency {
    pub kind: ResidencyKind,
    /// Also written to the backing store for consumers outside the group.
    pub exported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationalPlan {
    pub rank: String,
    pub tile: usize,
    /// Recurrent tensors (read at an earlier generation) and their on-chip state.
    pub recurrent: Vec<(String, ResidencyKind)>,
    pub on_chip_elements: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionGroup {
    pub id: usize,
    pub members: Vec<EinsumId>,
    pub segments: Vec<Segment>,
    pub bridges: Vec<Bridge>,
    /// Ranks stationary across the whole group, outermost first.
    pub stationary: Vec<String>,
    pub residency: BTreeMap<String, Residency>,
    pub generational: Option<GenerationalPlan>,
}

impl FusionGroup {
    pub fn links(&self) -> Vec<&Link> {
        let mut v: Vec<&Link> = Vec::new();
        for (k, s) in self.segments.iter().enumerate() {
            v.extend(s.links.iter());
            if let Some(b) = self.bridges.iter().find(|b| b.after_segment == k) {
                v.push(&b.link);
            }
        }
        v
    }

    /// The running intersection chain; fully fused groups concatenate their segments.
    pub fn chain(&self) -> Vec<&RankSet> {
        self.segments.iter().flat_map(|s| s.chain.iter()).collect()
    }

    pub fn contains(&self, id: EinsumId) -> bool {
        self.members.contains(&id)
    }

    pub fn segment_of(&self, id: EinsumId) -> usize {
        self.segments
            .iter()
            .position(|s| s.members.contains(&id))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionPlan {
    pub policy: String,
    pub groups: Vec<FusionGroup>,
}

impl FusionPlan {
    pub fn group_of(&self, id: EinsumId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(id))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "policy {}: {} fusion groups\n",
            self.policy,
            self.groups.len()
        );
        for g in &self.groups {
            let ids: Vec<String> = g.members.iter().map(|i| i.to_string()).collect();
            s += &format!(
                "group {} [{}] stationary [{}]\n",
                g.id,
                ids.join(","),
                g.stationary.join(",")
            );
            for l in g.links() {
                s += &format!("  E{} -> E{}: {}\n", l.up, l.dwn, l.class);
            }
            let chains: Vec<String> = g.chain().iter().map(|c| format!("[{}]", join(c))).collect();
            if !chains.is_empty() {
                s += &format!("  chain {}\n", chains.join(" "));
            }
            for (t, r) in &g.residency {
                let kind = match &r.kind {
                    ResidencyKind::OnChipUnit => "on-chip unit".to_string(),
                    ResidencyKind::OnChipTile { extents } => {
                        let e: Vec<String> =
                            extents.iter().map(|(r, n)| format!("{r}={n}")).collect();
                        format!("on-chip tile ({})", e.join(","))
                    }
                    ResidencyKind::Spilled { trigger: true } => "spilled with trigger".into(),
                    ResidencyKind::Spilled { trigger: false } => "backing store".into(),
                    ResidencyKind::MultiPass { passes } => format!("multi-pass ({passes})"),
                };
                let export = if r.exported { ", exported" } else { "" };
                s += &format!("  {t}: {kind}{export}\n");
            }
        }
        s
    }
}

fn join(s: &RankSet) -> String {
    s.iter().cloned().collect::<Vec<_>>().join(",")
}

/// Orders ranks outermost-first: spatial ranks in declaration order, the
/// generational rank last.
pub fn order_ranks<'a>(c: &Cascade, ranks: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = ranks.into_iter().cloned().collect();
    v.sort_by_key(|r| {
        let gen = c.rank(r).is_some_and(|d| d.is_generational());
        (gen, c.rank_order(r))
    });
    v.dedup();
    v
}

fn decl(c: &Cascade, id: EinsumId) -> &EinsumDecl {
    c.einsum(id).expect("member of the cascade")
}

/// Greedy stitching over the cascade in declaration order.
pub fn greedy_stitch(c: &Cascade, policy: StitchPolicy) -> Vec<FusionGroup> {
    let ids: Vec<EinsumId> = c.einsums.iter().map(|e| e.id).collect();
    stitch_ids(c, &ids, policy)
}

/// Stitches only the listed Einsums (a contiguous region) and leaves every
/// other Einsum as a singleton.
pub fn stitch_region(c: &Cascade, region: &[EinsumId], policy: StitchPolicy) -> Vec<FusionGroup> {
    let mut out = Vec::new();
    let mut run = Vec::new();
    for e in &c.einsums {
        if region.contains(&e.id) {
            run.push(e.id);
            continue;
        }
        if !run.is_empty() {
            out.extend(stitch_ids(c, &std::mem::take(&mut run), policy));
        }
        out.push(singleton(c, e.id));
    }
    if !run.is_empty() {
        out.extend(stitch_ids(c, &run, policy));
    }
    finish(c, out)
}

/// Re-bridges the segments of already stitched groups into fully fused groups.
pub fn bridge_groups(c: &Cascade, groups: &[FusionGroup]) -> Vec<FusionGroup> {
    let segs: Vec<Segment> = groups
        .iter()
        .flat_map(|g| g.segments.iter().cloned())
        .collect();
    finish(c, bridge(c, segs))
}

/// Every Einsum alone.
pub fn unfused_groups(c: &Cascade) -> Vec<FusionGroup> {
    finish(c, c.einsums.iter().map(|e| singleton(c, e.id)).collect())
}

fn stitch_ids(c: &Cascade, ids: &[EinsumId], policy: StitchPolicy) -> Vec<FusionGroup> {
    let base = if policy == StitchPolicy::FullyFused {
        StitchPolicy::RiRsbRsp
    } else {
        policy
    };
    let segments = segments(c, ids, base);
    let groups = if policy == StitchPolicy::FullyFused {
        bridge(c, segments)
    } else {
        segments
            .into_iter()
            .map(|s| group_from(vec![s], Vec::new()))
            .collect()
    };
    finish(c, groups)
}

fn singleton(c: &Cascade, id: EinsumId) -> FusionGroup {
    group_from(
        vec![segment_of(c, vec![id], Vec::new(), Vec::new())],
        Vec::new(),
    )
}

fn group_from(segments: Vec<Segment>, bridges: Vec<Bridge>) -> FusionGroup {
    FusionGroup {
        id: 0,
        members: segments
            .iter()
            .flat_map(|s| s.members.iter().copied())
            .collect(),
        segments,
        bridges,
        stationary: Vec::new(),
        residency: BTreeMap::new(),
        generational: None,
    }
}

fn segment_of(
    c: &Cascade,
    members: Vec<EinsumId>,
    links: Vec<Link>,
    chain: Vec<RankSet>,
) -> Segment {
    let mut s = Segment {
        members,
        links,
        chain,
        stationary: Vec::new(),
    };
    s.stationary = segment_stationary(c, &s);
    s
}

fn segments(c: &Cascade, ids: &[EinsumId], policy: StitchPolicy) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if i + 1 == ids.len() {
            out.push(segment_of(c, vec![ids[i]], Vec::new(), Vec::new()));
            break;
        }
        let a = decl(c, ids[i]);
        let b = decl(c, ids[i + 1]);
        let (ia, ib) = (iteration_ranks(a), iteration_ranks(b));
        let seed_class = relation(&ia, &ib);
        if !seed_connected(a, b, c) || !policy.admits_seed(seed_class) {
            out.push(segment_of(c, vec![ids[i]], Vec::new(), Vec::new()));
            i += 1;
            continue;
        }
        let mut members = vec![a.id, b.id];
        let mut links = vec![Link {
            up: a.id,
            dwn: b.id,
            class: classify_pair(a, b, c),
        }];
        let mut prev: RankSet = ia.intersection(&ib).cloned().collect();
        let mut chain = vec![prev.clone()];
        let mut j = i + 2;
        while j < ids.len() {
            let up = decl(c, ids[j - 1]);
            let e = decl(c, ids[j]);
            let (iu, ie) = (iteration_ranks(up), iteration_ranks(e));
            let curr: RankSet = iu.intersection(&ie).cloned().collect();
            let connected = members
                .iter()
                .any(|m| e.reads().contains(decl(c, *m).output_tensor()));
            if !(connected
                && policy.admits(relation(&iu, &ie))
                && policy.chain_allows(&prev, &curr))
            {
                break;
            }
            members.push(e.id);
            links.push(Link {
                up: up.id,
                dwn: e.id,
                class: classify_pair(up, e, c),
            });
            chain.push(curr.clone());
            prev = curr;
            j += 1;
        }
        out.push(segment_of(c, members, links, chain));
        i = j;
    }
    out
}

/// Joins consecutive segments whenever the later one reads something the
/// earlier ones produce.
fn bridge(c: &Cascade, segs: Vec<Segment>) -> Vec<FusionGroup> {
    let mut groups = Vec::new();
    let mut cur: Vec<Segment> = Vec::new();
    let mut bridges = Vec::new();
    for s in segs {
        if let Some(last) = cur.last() {
            let produced: BTreeSet<&str> = cur
                .iter()
                .flat_map(|x| x.members.iter())
                .map(|m| decl(c, *m).output_tensor())
                .collect();
            let crossing: BTreeSet<String> = s
                .members
                .iter()
                .flat_map(|m| decl(c, *m).reads())
                .filter(|t| produced.contains(t))
                .map(str::to_string)
                .collect();
            if crossing.is_empty() {
                groups.push(group_from(
                    std::mem::take(&mut cur),
                    std::mem::take(&mut bridges),
                ));
            } else {
                let up = decl(c, *last.members.last().expect("non-empty"));
                let dwn = decl(c, s.members[0]);
                bridges.push(Bridge {
                    after_segment: cur.len() - 1,
                    link: Link {
                        up: up.id,
                        dwn: dwn.id,
                        class: classify_pair(up, dwn, c),
                    },
                    tensors: crossing.into_iter().collect(),
                });
            }
        }
        cur.push(s);
    }
    if !cur.is_empty() {
        groups.push(group_from(cur, bridges));
    }
    groups
}

/// Ranks surviving the intersection chain, less any rank an in-segment
/// producer reduces before an in-segment consumer reads its result.
fn segment_stationary(c: &Cascade, s: &Segment) -> Vec<String> {
    let mut set: RankSet = match s.chain.first() {
        None => decl(c, s.members[0])
            .output
            .ranks()
            .map(str::to_string)
            .collect(),
        Some(first) => s.chain.iter().skip(1).fold(first.clone(), |acc, x| {
            acc.intersection(x).cloned().collect()
        }),
    };
    for (k, m) in s.members.iter().enumerate() {
        let p = decl(c, *m);
        let consumed = s.members[k + 1..]
            .iter()
            .any(|d| decl(c, *d).reads().contains(p.output_tensor()));
        if consumed {
            for r in &p.reduction_ranks {
                set.remove(r);
            }
        }
    }
    order_ranks(c, &set)
}

pub fn stationary_ranks(group: &FusionGroup) -> Vec<String> {
    group.stationary.clone()
}

fn finish(c: &Cascade, mut groups: Vec<FusionGroup>) -> Vec<FusionGroup> {
    for (k, g) in groups.iter_mut().enumerate() {
        g.id = k;
        let common = g.segments.iter().skip(1).fold(
            g.segments[0]
                .stationary
                .iter()
                .cloned()
                .collect::<RankSet>(),
            |acc, s| {
                acc.intersection(&s.stationary.iter().cloned().collect())
                    .cloned()
                    .collect()
            },
        );
        let mut common = common;
        for (k, m) in g.members.iter().enumerate() {
            let p = decl(c, *m);
            if g.members[k + 1..]
                .iter()
                .any(|d| decl(c, *d).reads().contains(p.output_tensor()))
            {
                for r in &p.reduction_ranks {
                    common.remove(r);
                }
            }
        }
        g.stationary = order_ranks(c, &common);
        g.residency = derive_residency(c, g);
        if let Some(plan) = handle_generational(c, g, 1) {
            for (t, kind) in &plan.recurrent {
                if let Some(r) = g.residency.get_mut(t) {
                    if matches!(r.kind, ResidencyKind::OnChipUnit) {
                        r.kind = kind.clone();
                    }
                }
            }
            g.generational = Some(plan);
        }
    }
    groups
}

/// Number of members strictly between `p` and `d` that reduce a rank of
/// `tensor` and that `d` depends on. A reduction `d` does not wait for can
/// share the producer's loops with it.
pub fn barriers(c: &Cascade, g: &FusionGroup, p: EinsumId, d: EinsumId, tensor: &str) -> u32 {
    let sig: BTreeSet<&str> = c
        .tensor(tensor)
        .map(|t| t.ranks.iter().map(String::as_str).collect())
        .unwrap_or_default();
    let (Some(pp), Some(pd)) = (
        g.members.iter().position(|m| *m == p),
        g.members.iter().position(|m| *m == d),
    ) else {
        return 0;
    };
    if pd <= pp {
        return 0;
    }
    let mut needed: BTreeSet<&str> = decl(c, d).reads();
    let mut n = 0;
    for m in g.members[pp + 1..pd].iter().rev() {
        let e = decl(c, *m);
        if !needed.contains(e.output_tensor()) {
            continue;
        }
        needed.extend(e.reads());
        if e.reduction_ranks.iter().any(|r| sig.contains(r.as_str())) {
            n += 1;
        }
    }
    n
}

/// Tensors produced in one segment and read in a later one.
pub fn crossing_tensors(c: &Cascade, g: &FusionGroup) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for m in &g.members {
        let p = decl(c, *m);
        let sp = g.segment_of(*m);
        for d in &g.members {
            if g.segment_of(*d) > sp && decl(c, *d).reads().contains(p.output_tensor()) {
                out.insert(p.output.tensor.clone());
            }
        }
    }
    out
}

/// Residency of every tensor produced in the group.
pub fn derive_residency(c: &Cascade, g: &FusionGroup) -> BTreeMap<String, Residency> {
    let crossing = crossing_tensors(c, g);
    let mut out = BTreeMap::new();
    for m in &g.members {
        let p = decl(c, *m);
        let t = p.output_tensor();
        let pos_p = g.members.iter().position(|x| x == m).expect("member");
        let readers: Vec<EinsumId> = c.consumers(t).iter().map(|&i| c.einsums[i].id).collect();
        let own = c.position(*m);
        let terminal = readers.iter().all(|r| c.position(*r) <= own);
        let exported = terminal || readers.iter().any(|r| !g.contains(*r));
        let forward: Vec<EinsumId> = readers
            .iter()
            .copied()
            .filter(|r| {
                g.members
                    .iter()
                    .position(|x| x == r)
                    .is_some_and(|q| q > pos_p)
            })
            .collect();
        let backward = readers.iter().any(|r| {
            g.members
                .iter()
                .position(|x| x == r)
                .is_some_and(|q| q <= pos_p)
        });
        let kind = if crossing.contains(t) {
            ResidencyKind::Spilled { trigger: true }
        } else if forward.is_empty() && !backward {
            ResidencyKind::Spilled { trigger: false }
        } else {
            let ks: BTreeSet<u32> = forward
                .iter()
                .map(|d| barriers(c, g, *m, *d, t))
                .filter(|k| *k > 0)
                .collect();
            if ks.is_empty() {
                ResidencyKind::OnChipUnit
            } else {
                ResidencyKind::MultiPass {
                    passes: 1 + ks.len() as u32,
                }
            }
        };
        out.insert(t.to_string(), Residency { kind, exported });
    }
    out
}

/// Recurrent state kept on chip across generations. Returns `None` when no
/// member reads an earlier generation of an in-group tensor.
pub fn handle_generational(c: &Cascade, g: &FusionGroup, tile: usize) -> Option<GenerationalPlan> {
    let mut rank = None;
    let mut tensors = BTreeSet::new();
    for m in &g.members {
        let e = decl(c, *m);
        let Some(gr) = c.generational_rank(e) else {
            continue;
        };
        for a in e.back_reads(&gr.name) {
            if g.members
                .iter()
                .any(|x| decl(c, *x).output_tensor() == a.tensor)
            {
                rank = Some(gr.clone());
                tensors.insert(a.tensor.clone());
            }
        }
    }
    let gr = rank?;
    let mut warnings = Vec::new();
    let extent = gr.trip_count().max(1);
    let tile = if tile == 0 {
        warnings.push("generational tile of 0 raised to 1".to_string());
        1
    } else if tile > extent {
        warnings.push(format!("generational tile {tile} clamped to {extent}"));
        extent
    } else {
        tile
    };
    let stationary: BTreeSet<&str> = g.stationary.iter().map(String::as_str).collect();
    let mut recurrent = Vec::new();
    let mut elements = 0u64;
    for t in tensors {
        let ranks: Vec<&String> = c
            .tensor(&t)
            .map(|d| d.ranks.iter().filter(|r| **r != gr.name).collect())
            .unwrap_or_default();
        let held: Vec<(String, usize)> = ranks
            .iter()
            .filter(|r| tile > 1 || !stationary.contains(r.as_str()))
            .map(|r| ((*r).clone(), c.rank_shape(r)))
            .collect();
        let kind = if held.is_empty() {
            elements += 1;
            ResidencyKind::OnChipUnit
        } else {
            elements += held.iter().map(|(_, n)| *n as u64).product::<u64>();
            ResidencyKind::OnChipTile { extents: held }
        };
        recurrent.push((t, kind));
    }
    Some(GenerationalPlan {
        rank: gr.name.clone(),
        tile,
        recurrent,
        on_chip_elements: elements,
        warnings,
    })
}

/// Groups a cascade under a policy and numbers them.
pub fn plan(c: &Cascade, policy: StitchPolicy) -> FusionPlan {
    FusionPlan {
        policy: policy.name().to_string(),
        groups: greedy_stitch(c, policy),
    }
}
