use std::fmt::Write;

use super::{BufferLevel, LoopNest, LoopPart, Node, Source};
use crate::ir::{Access, Cascade, Expr};

/// Python-style pseudocode for a nest. Intermediates held as a single
/// element print as `T_reg`, on-chip tiles as `T_buf[...]`.
pub fn render(nest: &LoopNest, c: &Cascade) -> String {
    let mut out = String::new();
    for g in &nest.groups {
        let ids: Vec<String> = g.members.iter().map(|m| format!("E{m}")).collect();
        let _ = writeln!(out, "# fusion group {}: {}", g.id, ids.join(" "));
    }
    nodes(&nest.body, c, nest, 0, &mut out);
    out
}

fn indent(depth: usize) -> String {
    "  ".repeat(depth)
}

fn nodes(body: &[Node], c: &Cascade, nest: &LoopNest, depth: usize, out: &mut String) {
    for n in body {
        match n {
            Node::Loop { spec, body } => {
                let v = spec.rank.to_lowercase();
                let extent = spec.rank.clone();
                let head = match spec.part {
                    LoopPart::Full if spec.stride == 1 => format!("for {v} in range({extent}):"),
                    LoopPart::Full => format!("for {v} in range(0, {extent}, {}):", spec.stride),
                    LoopPart::TileOuter { tile } => {
                        format!("for {v}_t in range(0, {extent}, {tile}):")
                    }
                    LoopPart::TileInner { tile } => {
                        format!("for {v} in range({v}_t, min({v}_t + {tile}, {extent})):")
                    }
                };
                let _ = writeln!(out, "{}{head}", indent(depth));
                nodes(body, c, nest, depth + 1, out);
            }
            Node::Trigger(t) => {
                let what = match t.tile_ranks.len() {
                    0 => "element".to_string(),
                    1 => format!("{}-fiber", t.tile_ranks[0]),
                    _ => format!("{}-tile", t.tile_ranks.join("")),
                };
                let _ = writeln!(
                    out,
                    "{}# {what} of {} is ready here (transition to E{})",
                    indent(depth),
                    t.tensor,
                    t.consumer
                );
            }
            Node::Compute(s) => {
                let Some(e) = c.einsum(s.einsum) else {
                    continue;
                };
                let level = |t: &str| {
                    nest.buffers
                        .iter()
                        .find(|b| b.group == s.group && b.tensor == t)
                        .map(|b| b.level)
                };
                let name = |a: &Access, src: Source| -> String {
                    match (src, level(&a.tensor)) {
                        (Source::OnChip, Some(BufferLevel::RegisterUnit)) => {
                            format!("{}_reg", a.tensor)
                        }
                        (Source::OnChip, _) => format!("{}_buf{}", a.tensor, subscript(a)),
                        _ => a.render(),
                    }
                };
                let out_src = if s.on_chip && !s.write_back {
                    Source::OnChip
                } else {
                    Source::Backing { pass: 0 }
                };
                let op = if e.accumulate { "+=" } else { "=" };
                let line = |lhs: &Access, body: &Expr, srcs: &[Source]| -> String {
                    let list = body.accesses();
                    let text = body.render_with(&|a: &Access| {
                        let k = list.iter().position(|x| std::ptr::eq(*x, a)).unwrap_or(0);
                        name(
                            a,
                            srcs.get(k).copied().unwrap_or(Source::Backing { pass: 0 }),
                        )
                    });
                    format!("{} {op} {text}", name(lhs, out_src))
                };
                let tag = format!("# E{}", e.label());
                match &e.init {
                    None => {
                        let _ = writeln!(
                            out,
                            "{}{}  {tag}",
                            indent(depth),
                            line(&e.output, &e.body, &s.reads)
                        );
                    }
                    Some(init) => {
                        let gen = c
                            .generational_rank(e)
                            .map(|r| r.name.to_lowercase())
                            .unwrap_or_default();
                        let _ = writeln!(out, "{}if {gen} == 0:  {tag}", indent(depth));
                        let _ = writeln!(
                            out,
                            "{}{}",
                            indent(depth + 1),
                            line(&init.output, &init.body, &s.init_reads)
                        );
                        let _ = writeln!(out, "{}else:", indent(depth));
                        let _ = writeln!(
                            out,
                            "{}{}",
                            indent(depth + 1),
                            line(&e.output, &e.body, &s.reads)
                        );
                    }
                }
            }
        }
    }
}

fn subscript(a: &Access) -> String {
    if a.indices.is_empty() {
        String::new()
    } else {
        let idx: Vec<String> = a.indices.iter().map(|i| i.render()).collect();
        format!("[{}]", idx.join(","))
    }
}
