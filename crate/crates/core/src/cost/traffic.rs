//! Closed-form backing-store traffic of a loop nest.
//!
//! Each statement runs over the full product of its ranks, so the set of
//! elements one access touches is a box: a per-axis index set taken over the
//! statement's domain. Several accesses to the same tensor in one scope are
//! combined by inclusion-exclusion over box intersections. Counts are distinct
//! elements per `(group, pass, tensor)` for reads and per `(group, tensor)` for
//! writes, the same scopes the interpreter counts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::ir::{Access, Cascade, IndexExpr};
use crate::schedule::{LoopNest, Source};

/// Distinct elements moved to or from the backing store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Traffic {
    pub reads: BTreeMap<(usize, u32, String), u64>,
    pub writes: BTreeMap<(usize, String), u64>,
}

impl Traffic {
    pub fn total_reads(&self) -> u64 {
        self.reads.values().sum()
    }

    pub fn total_writes(&self) -> u64 {
        self.writes.values().sum()
    }

    /// Reads of `tensor` in `group` summed over passes.
    pub fn group_reads(&self, group: usize, tensor: &str) -> u64 {
        self.reads
            .iter()
            .filter(|((g, _, t), _)| *g == group && t == tensor)
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Bits {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, k: usize) {
        self.0[k / 64] |= 1 << (k % 64);
    }
    fn count(&self) -> u64 {
        self.0.iter().map(|w| w.count_ones() as u64).sum()
    }
    fn and(&self, o: &Bits) -> Bits {
        Bits(self.0.iter().zip(&o.0).map(|(a, b)| a & b).collect())
    }
}

/// Touched elements of one tensor: a product of per-axis sets, or an explicit
/// list of offsets when two axes share a loop variable.
#[derive(Clone)]
enum Region {
    Boxed(Vec<Bits>),
    Points(HashSet<usize>),
}

/// Values a rank takes inside a statement's domain.
type Domain = BTreeMap<String, Vec<i64>>;

const ENUMERATION_LIMIT: u64 = 50_000_000;

fn rank_values(c: &Cascade, rank: &str) -> Vec<i64> {
    let d = c.rank(rank).expect("declared rank");
    (0..d.trip_count())
        .map(|k| (k * d.stride()) as i64)
        .collect()
}

fn axis_vars(ix: &IndexExpr) -> Vec<&str> {
    match ix {
        IndexExpr::Affine { var: Some(v), .. } => vec![v.as_str()],
        IndexExpr::Affine { var: None, .. } => Vec::new(),
        IndexExpr::Window { var, window } => vec![var.as_str(), window.as_str()],
    }
}

fn eval(ix: &IndexExpr, at: &BTreeMap<&str, i64>) -> i64 {
    match ix {
        IndexExpr::Affine { var, coef, offset } => {
            var.as_ref().map_or(0, |v| coef * at[v.as_str()]) + offset
        }
        IndexExpr::Window { var, window } => at[var.as_str()] - at[window.as_str()],
    }
}

fn region(c: &Cascade, a: &Access, dom: &Domain) -> Result<Region> {
    let shape = c.shape(&a.tensor);
    let vars: Vec<Vec<&str>> = a.indices.iter().map(axis_vars).collect();
    let mut seen = BTreeSet::new();
    let independent = vars.iter().flatten().all(|v| seen.insert(*v));
    let values = |v: &str| dom.get(v).cloned().unwrap_or_else(|| rank_values(c, v));

    if independent {
        let mut axes = Vec::new();
        for (ix, n) in a.indices.iter().zip(&shape) {
            let mut bits = Bits::new(*n);
            let names = axis_vars(ix);
            let lists: Vec<Vec<i64>> = names.iter().map(|v| values(v)).collect();
            let mut at = BTreeMap::new();
            for_each_point(&names, &lists, &mut at, &mut |at| {
                let k = eval(ix, at);
                if k >= 0 && (k as usize) < *n {
                    bits.set(k as usize);
                }
            });
            axes.push(bits);
        }
        return Ok(Region::Boxed(axes));
    }

    let names: Vec<&str> = seen.into_iter().collect();
    let lists: Vec<Vec<i64>> = names.iter().map(|v| values(v)).collect();
    let points: u64 = lists.iter().map(|l| l.len() as u64).product();
    if points > ENUMERATION_LIMIT {
        return Err(Error::Config(format!(
            "access {} repeats a loop variable over {points} points; too large to count",
            a.render()
        )));
    }
    let mut set = HashSet::new();
    let mut at = BTreeMap::new();
    for_each_point(&names, &lists, &mut at, &mut |at| {
        let mut off = 0usize;
        for (ix, n) in a.indices.iter().zip(&shape) {
            let k = eval(ix, at);
            if k < 0 || k as usize >= *n {
                return;
            }
            off = off * n + k as usize;
        }
        set.insert(off);
    });
    Ok(Region::Points(set))
}

fn for_each_point<'a>(
    names: &[&'a str],
    lists: &[Vec<i64>],
    at: &mut BTreeMap<&'a str, i64>,
    f: &mut dyn FnMut(&BTreeMap<&'a str, i64>),
) {
    match names.split_first() {
        None => f(at),
        Some((v, rest)) => {
            for x in &lists[0] {
                at.insert(v, *x);
                for_each_point(rest, &lists[1..], at, f);
            }
        }
    }
}

fn expand(r: &Region, shape: &[usize]) -> HashSet<usize> {
    match r {
        Region::Points(p) => p.clone(),
        Region::Boxed(axes) => {
            let mut out: Vec<usize> = vec![0];
            for (bits, n) in axes.iter().zip(shape) {
                let members: Vec<usize> = (0..*n)
                    .filter(|k| bits.0[k / 64] >> (k % 64) & 1 == 1)
                    .collect();
                out = out
                    .iter()
                    .flat_map(|o| members.iter().map(move |k| o * n + k))
                    .collect();
            }
            out.into_iter().collect()
        }
    }
}

/// Size of the union of the regions touched in one scope.
fn union_size(regions: &[Region], shape: &[usize]) -> u64 {
    let mut boxes: Vec<&Vec<Bits>> = Vec::new();
    let mut explicit = false;
    for r in regions {
        match r {
            Region::Boxed(b) => {
                if !boxes.contains(&b) {
                    boxes.push(b);
                }
            }
            Region::Points(_) => explicit = true,
        }
    }
    if explicit || boxes.len() > 16 {
        let mut all = HashSet::new();
        for r in regions {
            all.extend(expand(r, shape));
        }
        return all.len() as u64;
    }
    let mut total: i128 = 0;
    for mask in 1u32..(1 << boxes.len()) {
        let chosen: Vec<&Vec<Bits>> = (0..boxes.len())
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| boxes[k])
            .collect();
        let mut size: i128 = 1;
        for d in 0..shape.len() {
            let mut acc = chosen[0][d].clone();
            for b in &chosen[1..] {
                acc = acc.and(&b[d]);
            }
            size *= acc.count() as i128;
            if size == 0 {
                break;
            }
        }
        total += if mask.count_ones() % 2 == 1 {
            size
        } else {
            -size
        };
    }
    total as u64
}

/// Backing-store traffic of every statement in the nest.
pub fn traffic(nest: &LoopNest, c: &Cascade) -> Result<Traffic> {
    let mut reads: BTreeMap<(usize, u32, String), Vec<Region>> = BTreeMap::new();
    let mut writes: BTreeMap<(usize, String), Vec<Region>> = BTreeMap::new();

    for s in nest.computes() {
        let e = c
            .einsum(s.einsum)
            .ok_or_else(|| Error::Exec(format!("nest names unknown E{}", s.einsum)))?;
        let full: Domain = e
            .rank_names()
            .iter()
            .map(|r| (r.clone(), rank_values(c, r)))
            .collect();
        let gen = c.generational_rank(e).map(|r| r.name.clone());

        // (output, accesses, sources, domain) for the body and the optional init.
        let mut parts: Vec<(&Access, Vec<&Access>, &[Source], Domain)> = Vec::new();
        match (&e.init, &gen) {
            (Some(init), Some(g)) => {
                let mut first = full.clone();
                let mut rest = full.clone();
                let vals = full.get(g).cloned().unwrap_or_default();
                first.insert(
                    g.clone(),
                    vals.iter().copied().filter(|v| *v == 0).collect(),
                );
                rest.insert(
                    g.clone(),
                    vals.iter().copied().filter(|v| *v != 0).collect(),
                );
                parts.push((&init.output, init.body.accesses(), &s.init_reads, first));
                parts.push((&e.output, e.body.accesses(), &s.reads, rest));
            }
            _ => parts.push((&e.output, e.body.accesses(), &s.reads, full)),
        }

        for (out, accs, srcs, dom) in parts {
            if dom.values().any(Vec::is_empty) {
                continue;
            }
            for (a, src) in accs.iter().zip(srcs) {
                if let Source::Backing { pass } = src {
                    reads
                        .entry((s.group, *pass, a.tensor.clone()))
                        .or_default()
                        .push(region(c, a, &dom)?);
                }
            }
            if s.write_back {
                writes
                    .entry((s.group, out.tensor.clone()))
                    .or_default()
                    .push(region(c, out, &dom)?);
            }
        }
    }

    let mut t = Traffic::default();
    for ((g, p, name), rs) in reads {
        let n = union_size(&rs, &c.shape(&name));
        if n > 0 {
            t.reads.insert((g, p, name), n);
        }
    }
    for ((g, name), rs) in writes {
        let n = union_size(&rs, &c.shape(&name));
        if n > 0 {
            t.writes.insert((g, name), n);
        }
    }
    Ok(t)
}
