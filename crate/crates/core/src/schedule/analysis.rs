use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{
    BufferLevel, Compute, GroupSchedule, Loop, LoopNest, LoopPart, Node, Source, TriggerSpec,
};
use crate::fusion::{FusionGroup, ResidencyKind};
use crate::ir::{Access, Cascade, EinsumId};

/// A compute statement with the loops enclosing it, outermost first.
#[derive(Debug, Clone)]
pub struct StatementSite {
    pub compute: Compute,
    pub path: Vec<Loop>,
}

#[derive(Debug, Clone)]
pub struct TriggerSite {
    pub trigger: TriggerSpec,
    pub path: Vec<Loop>,
}

pub fn statements(nest: &LoopNest) -> Vec<StatementSite> {
    let mut out = Vec::new();
    walk(&nest.body, &mut Vec::new(), &mut |n, path| {
        if let Node::Compute(c) = n {
            out.push(StatementSite {
                compute: c.clone(),
                path: path.to_vec(),
            });
        }
    });
    out
}

pub fn trigger_sites(nest: &LoopNest) -> Vec<TriggerSite> {
    let mut out = Vec::new();
    walk(&nest.body, &mut Vec::new(), &mut |n, path| {
        if let Node::Trigger(t) = n {
            out.push(TriggerSite {
                trigger: t.clone(),
                path: path.to_vec(),
            });
        }
    });
    out
}

fn walk(nodes: &[Node], path: &mut Vec<Loop>, f: &mut dyn FnMut(&Node, &[Loop])) {
    for n in nodes {
        match n {
            Node::Loop { spec, body } => {
                path.push(spec.clone());
                walk(body, path, f);
                path.pop();
            }
            other => f(other, path),
        }
    }
}

/// Live set of one in-group producer-consumer link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkFootprint {
    pub group: usize,
    pub tensor: String,
    pub producer: EinsumId,
    pub consumer: EinsumId,
    /// The consumer reads an earlier generation.
    pub back_read: bool,
    /// Elements held between production and consumption.
    pub elements: u64,
    pub extents: Vec<(String, usize)>,
    /// Loops below the shared prefix that index the tensor.
    pub contributors: Vec<Loop>,
}

fn is_back_read(c: &Cascade, consumer: EinsumId, a: &Access) -> bool {
    let Some(e) = c.einsum(consumer) else {
        return false;
    };
    let Some(g) = c.generational_rank(e) else {
        return false;
    };
    e.back_reads(&g.name).iter().any(|b| b == &a)
}

#[allow(clippy::too_many_arguments)]
fn link(
    c: &Cascade,
    group: usize,
    t: &str,
    p: EinsumId,
    d: EinsumId,
    back: bool,
    pp: &[Loop],
    pd: &[Loop],
) -> LinkFootprint {
    let gen: Option<String> = c
        .einsum(d)
        .and_then(|e| c.generational_rank(e))
        .map(|r| r.name.clone());
    let mut lca = pp.iter().zip(pd).take_while(|(a, b)| a.id == b.id).count();
    if back {
        if let Some(k) = pp[..lca].iter().position(|l| Some(&l.rank) == gen.as_ref()) {
            lca = k;
        }
    }
    let sig: BTreeSet<&str> = c
        .tensor(t)
        .map(|d| d.ranks.iter().map(String::as_str).collect())
        .unwrap_or_default();
    let mut contributors = Vec::new();
    let mut span: BTreeMap<String, usize> = BTreeMap::new();
    for l in pp[lca..].iter().chain(&pd[lca..]) {
        if !sig.contains(l.rank.as_str()) || (back && Some(&l.rank) == gen.as_ref()) {
            continue;
        }
        if !contributors.iter().any(|x: &Loop| x.id == l.id) {
            contributors.push(l.clone());
        }
        let s = span.entry(l.rank.clone()).or_insert(0);
        *s = (*s).max(l.span());
    }
    let elements = span.values().map(|n| *n as u64).product();
    LinkFootprint {
        group,
        tensor: t.to_string(),
        producer: p,
        consumer: d,
        back_read: back,
        elements,
        extents: span.into_iter().collect(),
        contributors,
    }
}

/// Footprint of every link whose producer and consumer share a group.
pub fn footprints(
    c: &Cascade,
    groups: &[FusionGroup],
    sites: &[StatementSite],
) -> Vec<LinkFootprint> {
    let path_of: BTreeMap<EinsumId, &Vec<Loop>> =
        sites.iter().map(|s| (s.compute.einsum, &s.path)).collect();
    let mut out = Vec::new();
    for g in groups {
        for d in &g.members {
            let Some(e) = c.einsum(*d) else { continue };
            let mut seen = BTreeSet::new();
            let inits = e.init.iter().flat_map(|i| i.body.accesses());
            for a in e.body.accesses().into_iter().chain(inits) {
                let Some(p) = c.producer(&a.tensor).map(|i| c.einsums[i].id) else {
                    continue;
                };
                if !g.contains(p) {
                    continue;
                }
                let back = is_back_read(c, *d, a);
                if !seen.insert((a.tensor.clone(), back)) {
                    continue;
                }
                let (Some(pp), Some(pd)) = (path_of.get(&p), path_of.get(d)) else {
                    continue;
                };
                out.push(link(c, g.id, &a.tensor, p, *d, back, pp, pd));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub group: usize,
    pub tensor: Option<String>,
    pub rank: String,
    pub message: String,
}

/// Static proof that every on-chip link keeps its intermediate stationary:
/// between producing an element (or tile) and its last in-group read, no
/// loop outside the tile advances over the intermediate's ranks.
pub fn check_stationarity(c: &Cascade, groups: &[FusionGroup], nest: &LoopNest) -> Vec<Violation> {
    let sites = statements(nest);
    let links = footprints(c, groups, &sites);
    let sched: BTreeMap<usize, &GroupSchedule> = nest.groups.iter().map(|g| (g.id, g)).collect();
    let path_of: BTreeMap<EinsumId, &Vec<Loop>> =
        sites.iter().map(|s| (s.compute.einsum, &s.path)).collect();
    let mut out = Vec::new();

    for s in &sites {
        let Some(e) = c.einsum(s.compute.einsum) else {
            continue;
        };
        let body = e.body.accesses();
        let init: Vec<&Access> = e.init.iter().flat_map(|i| i.body.accesses()).collect();
        let reads = body
            .iter()
            .zip(&s.compute.reads)
            .chain(init.iter().zip(&s.compute.init_reads));
        for (a, src) in reads {
            if *src != Source::OnChip {
                continue;
            }
            let back = is_back_read(c, e.id, a);
            let Some(l) = links
                .iter()
                .find(|l| l.consumer == e.id && l.tensor == a.tensor && l.back_read == back)
            else {
                continue;
            };
            let mut held: BTreeSet<&str> = match sched
                .get(&l.group)
                .and_then(|g| g.residency.get(&a.tensor))
                .map(|r| &r.kind)
            {
                Some(ResidencyKind::OnChipTile { extents }) => {
                    extents.iter().map(|(r, _)| r.as_str()).collect()
                }
                _ => BTreeSet::new(),
            };
            let tile_buffer = nest.buffers.iter().find(|b| {
                b.group == l.group && b.tensor == a.tensor && b.level == BufferLevel::OnChipTile
            });
            if tile_buffer.is_some_and(|b| b.footprint >= l.elements) {
                held.extend(l.extents.iter().map(|(r, _)| r.as_str()));
            }
            if back {
                for x in l
                    .contributors
                    .iter()
                    .filter(|x| !held.contains(x.rank.as_str()))
                {
                    out.push(Violation {
                        group: l.group,
                        tensor: Some(a.tensor.clone()),
                        rank: x.rank.clone(),
                        message: format!(
                            "E{} reads the previous generation of {} but loop {} is outside its on-chip state",
                            e.id, a.tensor, x.rank
                        ),
                    });
                }
            } else {
                // A loop over a rank the on-chip tile covers, or one that runs a
                // single iteration, never evicts a live element.
                let advances = |x: &&Loop| {
                    !matches!(x.part, LoopPart::TileInner { .. })
                        && !held.contains(x.rank.as_str())
                        && x.span() > 1
                };
                for x in l.contributors.iter().filter(advances) {
                    out.push(Violation {
                        group: l.group,
                        tensor: Some(a.tensor.clone()),
                        rank: x.rank.clone(),
                        message: format!(
                            "loop {} advances over {} between its production in E{} and its use in E{}",
                            x.rank, a.tensor, l.producer, l.consumer
                        ),
                    });
                }
            }
        }
    }
    out.dedup_by(|a, b| a.group == b.group && a.tensor == b.tensor && a.rank == b.rank);

    for t in trigger_sites(nest) {
        let sig: BTreeSet<&str> = c
            .tensor(&t.trigger.tensor)
            .map(|d| d.ranks.iter().map(String::as_str).collect())
            .unwrap_or_default();
        let reduced = c
            .einsum(t.trigger.producer)
            .map(|e| e.reduction_ranks.clone())
            .unwrap_or_default();
        let producer_loops: BTreeSet<usize> = path_of
            .get(&t.trigger.producer)
            .map(|p| p.iter().map(|l| l.id).collect())
            .unwrap_or_default();
        for l in &t.path {
            let partial = producer_loops.contains(&l.id) && reduced.contains(&l.rank);
            if !sig.contains(l.rank.as_str()) || partial {
                out.push(Violation {
                    group: t.trigger.group,
                    tensor: Some(t.trigger.tensor.clone()),
                    rank: l.rank.clone(),
                    message: format!(
                        "trigger on {} sits inside loop {}, so it fires before the final write",
                        t.trigger.tensor, l.rank
                    ),
                });
            }
        }
    }

    for g in &nest.groups {
        let n = g.stationary.len().min(g.prefix.len());
        if g.prefix[..n] != g.stationary[..n] || g.prefix.len() < g.stationary.len() {
            let rank = g
                .stationary
                .iter()
                .zip(&g.prefix)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone());
            out.push(Violation {
                group: g.id,
                tensor: None,
                rank: rank
                    .or_else(|| g.stationary.get(n).cloned())
                    .unwrap_or_default(),
                message: format!(
                    "stationary ranks [{}] are not the outermost group loops [{}]",
                    g.stationary.join(","),
                    g.prefix.join(",")
                ),
            });
        }
    }
    out
}
