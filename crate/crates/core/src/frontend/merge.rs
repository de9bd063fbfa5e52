//! Shared-input merging: Einsums that read one common tensor through
//! structurally identical bodies become a single Einsum whose output is the
//! concatenation of the member outputs along a fresh rank.

use serde::Serialize;

use crate::ir::{
    validate, Access, Cascade, DerivedInput, EinsumDecl, EinsumId, Expr, IndexExpr, RankDecl,
    TensorDecl,
};

#[derive(Debug, Clone, Serialize)]
pub struct MergeOutcome {
    #[serde(skip)]
    pub cascade: Cascade,
    pub merged: Vec<Vec<EinsumId>>,
    /// Sets left split, with the reason.
    pub rejected: Vec<(Vec<EinsumId>, String)>,
}

/// Applies each set in turn. A set that cannot be merged is reported and left
/// unchanged; the others still apply.
pub fn merge_shared_inputs(cascade: &Cascade, sets: &[Vec<EinsumId>]) -> MergeOutcome {
    let mut c = cascade.clone();
    let mut merged = Vec::new();
    let mut rejected = Vec::new();
    for set in sets {
        if set.len() < 2 {
            continue;
        }
        match merge_one(&c, set) {
            Ok(next) => {
                c = next;
                merged.push(set.clone());
            }
            Err(reason) => rejected.push((set.clone(), reason)),
        }
    }
    MergeOutcome {
        cascade: c,
        merged,
        rejected,
    }
}

/// Pairs of accesses that differ between two members at the same tree position.
fn unify<'a>(
    a: &'a Expr,
    b: &'a Expr,
    slots: &mut Vec<(&'a Access, &'a Access)>,
) -> Result<(), String> {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if x == y => Ok(()),
        (Expr::Unary(o1, c1), Expr::Unary(o2, c2)) if o1 == o2 => unify(c1, c2, slots),
        (Expr::Binary(o1, l1, r1), Expr::Binary(o2, l2, r2)) if o1 == o2 => {
            unify(l1, l2, slots)?;
            unify(r1, r2, slots)
        }
        (Expr::Access(x), Expr::Access(y)) => {
            if x.tensor == y.tensor {
                if x.indices == y.indices {
                    Ok(())
                } else {
                    Err(format!("shared input {} is indexed differently", x.tensor))
                }
            } else {
                slots.push((x, y));
                Ok(())
            }
        }
        _ => Err("bodies are not structurally identical".into()),
    }
}

fn merge_one(c: &Cascade, set: &[EinsumId]) -> Result<Cascade, String> {
    let mut pos: Vec<usize> = Vec::new();
    for id in set {
        pos.push(
            c.position(*id)
                .ok_or_else(|| format!("Einsum {id} not found"))?,
        );
    }
    pos.sort_unstable();
    pos.dedup();
    if pos.len() != set.len() {
        return Err("duplicate members".into());
    }
    let members: Vec<&EinsumDecl> = pos.iter().map(|&p| &c.einsums[p]).collect();
    let first = members[0];
    let outs: Vec<&str> = members.iter().map(|m| m.output.tensor.as_str()).collect();

    for m in &members {
        let recurrent = c
            .generational_rank(m)
            .is_some_and(|g| !m.back_reads(&g.name).is_empty());
        if m.init.is_some() || recurrent {
            return Err(format!("Einsum {} reads an earlier generation", m.id));
        }
        if m.accumulate != first.accumulate || m.reduction_ranks != first.reduction_ranks {
            return Err("members reduce over different ranks".into());
        }
        if m.output.indices.len() != first.output.indices.len() {
            return Err("member outputs have different ranks".into());
        }
        if m.reads().iter().any(|t| outs.contains(t)) {
            return Err(format!("Einsum {} reads another member's output", m.id));
        }
        for t in m.reads() {
            if let Some(p) = c.producer(t) {
                if p >= pos[0] {
                    return Err(format!("{t} is produced after the first member"));
                }
            }
        }
    }

    // Structural alignment against the first member.
    let mut slot_sets: Vec<Vec<&Access>> = Vec::new();
    for (k, m) in members.iter().enumerate() {
        let mut slots = Vec::new();
        unify(&first.body, &m.body, &mut slots)?;
        if k == 0 {
            continue;
        }
        if slot_sets.is_empty() {
            slot_sets = slots.iter().map(|(a, _)| vec![*a]).collect();
        } else if slots.len() != slot_sets.len() {
            return Err("bodies differ in their member-specific operands".into());
        }
        for (i, (_, b)) in slots.iter().enumerate() {
            slot_sets[i].push(b);
        }
    }
    if slot_sets.is_empty() {
        return Err("members have no member-specific operand to concatenate".into());
    }
    let shared: Vec<&Access> = first
        .body
        .accesses()
        .into_iter()
        .filter(|a| !slot_sets.iter().any(|s| std::ptr::eq(s[0], *a)))
        .collect();
    if shared.is_empty() {
        return Err("members share no common input".into());
    }

    // The one output position not covered by the shared inputs.
    let shared_ranks: Vec<&str> = shared.iter().flat_map(|a| a.ranks()).collect();
    let free: Vec<usize> = first
        .output
        .indices
        .iter()
        .enumerate()
        .filter(|(_, i)| i.plain().is_some_and(|v| !shared_ranks.contains(&v)))
        .map(|(p, _)| p)
        .collect();
    if free.len() != 1 {
        return Err(format!(
            "expected one concatenation rank, found {}",
            free.len()
        ));
    }
    let p = free[0];
    let dist: Vec<String> = members
        .iter()
        .map(|m| m.output.indices[p].plain().unwrap_or_default().to_string())
        .collect();
    for m in &members {
        for (q, (a, b)) in m
            .output
            .indices
            .iter()
            .zip(&first.output.indices)
            .enumerate()
        {
            if q != p && a != b {
                return Err("member outputs differ outside the concatenation rank".into());
            }
        }
    }

    let out_name = outs.join("_");
    let fused_rank = format!("F_{out_name}");
    if c.rank(&fused_rank).is_some() || c.tensor(&out_name).is_some() {
        return Err(format!("name {out_name} already in use"));
    }
    let extents: Vec<usize> = dist.iter().map(|r| c.rank_shape(r)).collect();
    let total: usize = extents.iter().sum();

    // Member-specific operands: inputs carrying the member's own rank on one axis.
    let mut derived = Vec::new();
    let mut slot_names = Vec::new();
    for slot in &slot_sets {
        let mut axis = None;
        for (k, a) in slot.iter().enumerate() {
            if !c.is_input(&a.tensor) {
                return Err(format!(
                    "{} is not an input and cannot be concatenated",
                    a.tensor
                ));
            }
            let hits: Vec<usize> = a
                .indices
                .iter()
                .enumerate()
                .filter(|(_, i)| i.plain() == Some(dist[k].as_str()))
                .map(|(q, _)| q)
                .collect();
            if hits.len() != 1 || a.ranks().filter(|r| *r == dist[k]).count() != 1 {
                return Err(format!(
                    "{} must carry rank {} on exactly one axis",
                    a.tensor, dist[k]
                ));
            }
            if *axis.get_or_insert(hits[0]) != hits[0] {
                return Err("member operands concatenate along different axes".into());
            }
            let base = &slot[0].indices;
            for (q, (x, y)) in a.indices.iter().zip(base).enumerate() {
                if q != hits[0] && x != y {
                    return Err(format!(
                        "{} is indexed differently from {}",
                        a.tensor, slot[0].tensor
                    ));
                }
            }
        }
        let axis = axis.expect("non-empty slot");
        let name = slot
            .iter()
            .map(|a| a.tensor.as_str())
            .collect::<Vec<_>>()
            .join("_");
        let decl = c.tensor(&slot[0].tensor).expect("validated");
        let mut ranks = decl.ranks.clone();
        ranks[axis] = fused_rank.clone();
        derived.push((
            TensorDecl {
                name: name.clone(),
                ranks,
            },
            DerivedInput {
                name: name.clone(),
                axis,
                sources: slot
                    .iter()
                    .zip(&extents)
                    .map(|(a, e)| (a.tensor.clone(), *e))
                    .collect(),
            },
        ));
        slot_names.push((slot[0].tensor.clone(), name, axis));
    }

    // Merged declaration from the first member's body.
    let mut body = first.body.clone();
    for a in body.accesses_mut() {
        if let Some((_, name, axis)) = slot_names.iter().find(|(src, ..)| *src == a.tensor) {
            a.tensor = name.clone();
            a.indices[*axis] = IndexExpr::var(&fused_rank);
        }
    }
    let mut out_idx = first.output.indices.clone();
    out_idx[p] = IndexExpr::var(&fused_rank);
    let mut merged = EinsumDecl::new(
        first.id,
        Access::new(&out_name, out_idx),
        first.accumulate,
        body,
    );
    merged.merged_from = members
        .iter()
        .flat_map(|m| {
            if m.merged_from.is_empty() {
                vec![m.id]
            } else {
                m.merged_from.clone()
            }
        })
        .collect();

    let mut next = c.clone();
    next.ranks.push(RankDecl::spatial(&fused_rank, total));

    // Consumers read slices of the merged output.
    let mut offsets = Vec::new();
    let mut acc = 0i64;
    for e in &extents {
        offsets.push(acc);
        acc += *e as i64;
    }
    let rewrite = |a: &mut Access| -> Result<(), String> {
        let Some(k) = outs.iter().position(|o| *o == a.tensor) else {
            return Ok(());
        };
        a.tensor = out_name.clone();
        match &mut a.indices[p] {
            IndexExpr::Affine { offset, .. } => {
                *offset += offsets[k];
                Ok(())
            }
            IndexExpr::Window { .. } => Err(format!(
                "a consumer reads {} through a window on the concatenation rank",
                outs[k]
            )),
        }
    };
    for e in next.einsums.iter_mut() {
        for a in e.body.accesses_mut() {
            rewrite(a)?;
        }
        if let Some(init) = &mut e.init {
            for a in init.body.accesses_mut() {
                rewrite(a)?;
            }
        }
    }

    let ids: Vec<EinsumId> = members.iter().map(|m| m.id).collect();
    next.einsums[pos[0]] = merged;
    next.einsums
        .retain(|e| e.id == first.id || !ids.contains(&e.id));

    let out_pos = next
        .tensors
        .iter()
        .position(|t| t.name == outs[0])
        .unwrap_or(next.tensors.len());
    let mut out_ranks = c
        .tensor(outs[0])
        .map(|t| t.ranks.clone())
        .unwrap_or_default();
    out_ranks[p] = fused_rank.clone();
    next.tensors.insert(
        out_pos,
        TensorDecl {
            name: out_name.clone(),
            ranks: out_ranks,
        },
    );
    next.tensors.retain(|t| !outs.contains(&t.name.as_str()));
    for (decl, dv) in derived {
        next.tensors.push(decl);
        next.derived.push(dv);
    }
    // Member operands now only feed the derived inputs.
    let still_read = |t: &str, n: &Cascade| n.einsums.iter().any(|e| e.reads().contains(t));
    let sources: Vec<String> = slot_sets
        .iter()
        .flatten()
        .map(|a| a.tensor.clone())
        .collect();
    let snapshot = next.clone();
    next.tensors
        .retain(|t| !sources.contains(&t.name) || still_read(&t.name, &snapshot));

    let diags = validate(&next);
    if !diags.is_empty() {
        return Err(format!("merged cascade is invalid: {}", diags[0]));
    }
    Ok(next)
}
