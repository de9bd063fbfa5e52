//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the stitcher, the lowering or the interpreter: the
//! partition oracle works from rank sets and tensor names alone, and the
//! Mamba reference is written out as plain loops.

#![allow(dead_code)]

use std::collections::BTreeSet;

use einfuse_core::frontend::{ParamSet, RMS_EPS};
use einfuse_core::fusion::StitchPolicy;
use einfuse_core::interp::{Dense, TensorStore};
use einfuse_core::{Cascade, EinsumDecl, EinsumId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Random cascades
// ---------------------------------------------------------------------------

const RANK_NAMES: [&str; 5] = ["M", "N", "K", "P", "Q"];

#[derive(Debug, Clone)]
struct Sig {
    name: String,
    ranks: Vec<usize>,
}

fn access(sig: &Sig) -> String {
    let idx: Vec<String> = sig
        .ranks
        .iter()
        .map(|r| RANK_NAMES[*r].to_lowercase())
        .collect();
    format!("{}[{}]", sig.name, idx.join(","))
}

fn random_subset(rng: &mut ChaCha8Rng, from: &[usize]) -> Vec<usize> {
    loop {
        let v: Vec<usize> = from
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.6))
            .collect();
        if !v.is_empty() {
            return v;
        }
    }
}

/// Description text of a random, valid cascade with at most `max_einsums`
/// Einsums over at most `max_ranks` spatial ranks of extent 1 to 3.
///
/// Most Einsums read the previous output, so long fusible chains are common.
/// Products only ever involve an input operand, which keeps values bounded.
pub fn random_cascade_text(seed: u64, max_einsums: usize, max_ranks: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nr = rng.random_range(1..=max_ranks.min(RANK_NAMES.len()));
    let ne = rng.random_range(1..=max_einsums);
    let extents: Vec<usize> = (0..nr).map(|_| rng.random_range(1..=3)).collect();
    let all: Vec<usize> = (0..nr).collect();

    let mut inputs: Vec<Sig> = Vec::new();
    let mut produced: Vec<Sig> = Vec::new();
    let mut lines = Vec::new();

    for j in 0..ne {
        let first = if j > 0 && rng.random_bool(0.8) {
            produced[j - 1].clone()
        } else if !produced.is_empty() && rng.random_bool(0.5) {
            produced[rng.random_range(0..produced.len())].clone()
        } else {
            let s = Sig {
                name: format!("IN{}", inputs.len()),
                ranks: random_subset(&mut rng, &all),
            };
            inputs.push(s.clone());
            s
        };
        let second = match rng.random_range(0..4) {
            0 => None,
            1 if produced.iter().any(|p| p.name != first.name) => {
                let pool: Vec<&Sig> = produced.iter().filter(|p| p.name != first.name).collect();
                Some((*pool[rng.random_range(0..pool.len())]).clone())
            }
            _ => {
                let s = Sig {
                    name: format!("IN{}", inputs.len()),
                    ranks: random_subset(&mut rng, &all),
                };
                inputs.push(s.clone());
                Some(s)
            }
        };
        let mut union: BTreeSet<usize> = first.ranks.iter().copied().collect();
        if let Some(s) = &second {
            union.extend(s.ranks.iter().copied());
        }
        let union: Vec<usize> = union.into_iter().collect();
        let out_ranks = random_subset(&mut rng, &union);
        let reduces = out_ranks.len() < union.len();
        let out = Sig {
            name: format!("T{}", j + 1),
            ranks: out_ranks,
        };

        let both_intermediate = second.as_ref().is_some_and(|s| !s.name.starts_with("IN"))
            && !first.name.starts_with("IN");
        let mut body = match &second {
            None => access(&first),
            Some(s) => {
                let op = if both_intermediate {
                    ["+", "-"][rng.random_range(0..2)]
                } else {
                    ["*", "+", "-"][rng.random_range(0..3)]
                };
                format!("{} {op} {}", access(&first), access(s))
            }
        };
        body = match rng.random_range(0..6) {
            0 => format!("sigmoid({body})"),
            1 => format!("silu({body})"),
            2 => format!("softplus({body})"),
            _ => body,
        };
        let assign = if reduces { "+=" } else { "=" };
        lines.push(format!(
            "einsum {}: {} {assign} {body}",
            j + 1,
            access(&out)
        ));
        produced.push(out);
    }

    let mut text = String::new();
    for (r, n) in extents.iter().enumerate() {
        text += &format!("rank {}({n})\n", RANK_NAMES[r]);
    }
    for s in inputs.iter().chain(&produced) {
        let ranks: Vec<&str> = s.ranks.iter().map(|r| RANK_NAMES[*r]).collect();
        text += &format!("tensor {} : {}\n", s.name, ranks.join(", "));
    }
    for l in lines {
        text += &l;
        text += "\n";
    }
    text
}

// ---------------------------------------------------------------------------
// Partition oracle for greedy stitching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rel {
    Same,
    Sub,
    Super,
    Disjointish,
}

fn ranks_of(e: &EinsumDecl) -> BTreeSet<String> {
    let mut s: BTreeSet<String> = BTreeSet::new();
    for ix in &e.output.indices {
        s.extend(ix.ranks().into_iter().map(str::to_string));
    }
    for a in e.body.accesses() {
        for ix in &a.indices {
            s.extend(ix.ranks().into_iter().map(str::to_string));
        }
    }
    s
}

fn rel(up: &BTreeSet<String>, dwn: &BTreeSet<String>) -> Rel {
    if up == dwn {
        Rel::Same
    } else if dwn.is_subset(up) {
        Rel::Sub
    } else if up.is_subset(dwn) {
        Rel::Super
    } else {
        Rel::Disjointish
    }
}

fn level(p: StitchPolicy) -> u8 {
    match p {
        StitchPolicy::RIOnly => 0,
        StitchPolicy::RiRsb => 1,
        StitchPolicy::RiRsbRsp | StitchPolicy::FullyFused => 2,
    }
}

fn rel_ok(p: StitchPolicy, r: Rel) -> bool {
    match r {
        Rel::Same => true,
        Rel::Sub => level(p) >= 1,
        Rel::Super => level(p) >= 2,
        Rel::Disjointish => false,
    }
}

fn reads(e: &EinsumDecl) -> BTreeSet<String> {
    e.body.accesses().iter().map(|a| a.tensor.clone()).collect()
}

fn produced_here(c: &Cascade, t: &str) -> bool {
    c.einsums.iter().any(|e| e.output.tensor == t)
}

/// Whether the block of consecutive Einsums would be built by sequential
/// admission: a connected seed pair of an acceptable class, then every later
/// member connected to the block, of an admitted class, and keeping the
/// running intersection within what the policy tolerates.
fn admissible(c: &Cascade, block: &[&EinsumDecl], p: StitchPolicy) -> bool {
    if block.len() < 2 {
        return true;
    }
    let (a, b) = (block[0], block[1]);
    let (ia, ib) = (ranks_of(a), ranks_of(b));
    let adjacent = reads(b).contains(&a.output.tensor);
    let common = reads(a)
        .intersection(&reads(b))
        .any(|t| produced_here(c, t));
    if !(adjacent || common) {
        return false;
    }
    let seed = rel(&ia, &ib);
    if level(p) < 2 && !rel_ok(p, seed) {
        return false;
    }
    let mut prev: BTreeSet<String> = ia.intersection(&ib).cloned().collect();
    for k in 2..block.len() {
        let (up, e) = (block[k - 1], block[k]);
        let (iu, ie) = (ranks_of(up), ranks_of(e));
        let connected = block[..k]
            .iter()
            .any(|m| reads(e).contains(&m.output.tensor));
        if !connected || !rel_ok(p, rel(&iu, &ie)) {
            return false;
        }
        let curr: BTreeSet<String> = iu.intersection(&ie).cloned().collect();
        let chain_ok = curr == prev
            || (level(p) >= 1 && curr.is_subset(&prev))
            || (level(p) >= 2 && curr.is_superset(&prev));
        if !chain_ok {
            return false;
        }
        prev = curr;
    }
    true
}

/// Enumerates every split of the cascade into consecutive blocks, keeps those
/// whose blocks are all admissible, and returns the one with the
/// lexicographically largest sequence of block sizes. Fully fused then joins
/// neighbouring blocks whenever the later one reads an earlier output.
pub fn oracle_groups(c: &Cascade, p: StitchPolicy) -> Vec<Vec<EinsumId>> {
    let es: Vec<&EinsumDecl> = c.einsums.iter().collect();
    let n = es.len();
    assert!(n <= 16, "partition oracle is exponential");
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1u32 << n.saturating_sub(1)) {
        let mut sizes = Vec::new();
        let mut start = 0;
        for i in 0..n {
            let cut = i + 1 == n || mask & (1 << i) != 0;
            if cut {
                sizes.push(i + 1 - start);
                start = i + 1;
            }
        }
        let mut ok = true;
        let mut at = 0;
        for s in &sizes {
            if !admissible(c, &es[at..at + s], p) {
                ok = false;
                break;
            }
            at += s;
        }
        if ok && best.as_ref().is_none_or(|b| sizes > *b) {
            best = Some(sizes);
        }
    }
    let mut blocks: Vec<Vec<EinsumId>> = Vec::new();
    let mut at = 0;
    for s in best.unwrap_or_default() {
        blocks.push(es[at..at + s].iter().map(|e| e.id).collect());
        at += s;
    }
    if p != StitchPolicy::FullyFused {
        return blocks;
    }
    let mut out: Vec<Vec<EinsumId>> = Vec::new();
    for b in blocks {
        let joins = out.last().is_some_and(|cur| {
            let outs: BTreeSet<String> = cur
                .iter()
                .map(|id| c.einsum(*id).unwrap().output.tensor.clone())
                .collect();
            b.iter().any(|id| {
                reads(c.einsum(*id).unwrap())
                    .iter()
                    .any(|t| outs.contains(t))
            })
        });
        if joins {
            out.last_mut().unwrap().extend(b);
        } else {
            out.push(b);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Straight-line Mamba-1 reference
// ---------------------------------------------------------------------------

fn input<'a>(s: &'a TensorStore, name: &str) -> &'a Dense {
    s.get(name)
        .unwrap_or_else(|| panic!("input {name} missing"))
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Every intermediate and output of the layer, computed with nested loops in
/// the order the equations are written. Inputs come from `store`.
pub fn mamba_reference(p: &ParamSet, store: &TensorStore) -> TensorStore {
    let ParamSet {
        b: nb,
        i: ni,
        e: ne,
        d: nd,
        n: nn,
        r: nr,
        w: nw,
        ..
    } = *p;
    let g = |n: &str| input(store, n);
    let (hin, res, gam) = (g("HIN"), g("RES"), g("G"));
    let (win, wres, wconv) = (g("WIN"), g("WRES"), g("WCONV"));
    let (wb, wxc, wdt1, wdt2, bdt) = (g("WB"), g("WXC"), g("WDT1"), g("WDT2"), g("BDT"));
    let (a, h0, dskip, wout) = (g("A"), g("H0"), g("DSKIP"), g("WOUT"));

    let mut x = Dense::zeros(&[nb, ni, ne]);
    let mut sq = Dense::zeros(&[nb, ni, ne]);
    let mut num = Dense::zeros(&[nb, ni]);
    let mut mean = Dense::zeros(&[nb, ni]);
    let mut sqex = Dense::zeros(&[nb, ni]);
    let mut nex = Dense::zeros(&[nb, ni, ne]);
    let mut tx = Dense::zeros(&[nb, ni, nd]);
    let mut rx = Dense::zeros(&[nb, ni, nd]);
    let mut ttx = Dense::zeros(&[nb, ni, nd]);
    let mut lex = Dense::zeros(&[nb, ni, nd]);
    let mut xb = Dense::zeros(&[nb, ni, nn]);
    let mut xc = Dense::zeros(&[nb, ni, nn]);
    let mut ttd = Dense::zeros(&[nb, ni, nr]);
    let mut dtp = Dense::zeros(&[nb, ni, nd]);
    let mut delta = Dense::zeros(&[nb, ni, nd]);
    let mut abar = Dense::zeros(&[nb, ni, nd, nn]);
    let mut bbar = Dense::zeros(&[nb, ni, nd, nn]);
    let mut bx = Dense::zeros(&[nb, ni, nd, nn]);
    let mut hh = Dense::zeros(&[nb, ni, nd, nn]);
    let mut h = Dense::zeros(&[nb, ni, nd, nn]);
    let mut s = Dense::zeros(&[nb, ni, nd]);
    let mut sd = Dense::zeros(&[nb, ni, nd]);
    let mut y = Dense::zeros(&[nb, ni, nd]);
    let mut o = Dense::zeros(&[nb, ni, ne]);

    fn set(t: &mut Dense, idx: &[usize], v: f64) {
        let k = t.offset(idx);
        t.data[k] = v;
    }
    fn add(t: &mut Dense, idx: &[usize], v: f64) {
        let k = t.offset(idx);
        t.data[k] += v;
    }

    for bi in 0..nb {
        for ii in 0..ni {
            for ei in 0..ne {
                let v = hin.at(&[bi, ii, ei]) + res.at(&[bi, ii, ei]);
                set(&mut x, &[bi, ii, ei], v);
                set(&mut sq, &[bi, ii, ei], v * v);
            }
            for ei in 0..ne {
                let v = sq.at(&[bi, ii, ei]);
                add(&mut num, &[bi, ii], v);
            }
            let m = num.at(&[bi, ii]) / ne as f64;
            set(&mut mean, &[bi, ii], m);
            let q = 1.0 / (m + RMS_EPS).sqrt();
            set(&mut sqex, &[bi, ii], q);
            for ei in 0..ne {
                let v = x.at(&[bi, ii, ei]) * q * gam.at(&[ei]);
                set(&mut nex, &[bi, ii, ei], v);
            }
            for di in 0..nd {
                for ei in 0..ne {
                    let n = nex.at(&[bi, ii, ei]);
                    add(&mut tx, &[bi, ii, di], n * win.at(&[ei, di]));
                    add(&mut rx, &[bi, ii, di], n * wres.at(&[ei, di]));
                }
            }
        }
    }

    for bi in 0..nb {
        for ii in 0..ni {
            for di in 0..nd {
                for wi in 0..nw {
                    if ii >= wi {
                        let v = tx.at(&[bi, ii - wi, di]) * wconv.at(&[di, wi]);
                        add(&mut ttx, &[bi, ii, di], v);
                    }
                }
                let v = silu(ttx.at(&[bi, ii, di]));
                set(&mut lex, &[bi, ii, di], v);
            }
            for ni_ in 0..nn {
                for di in 0..nd {
                    let l = lex.at(&[bi, ii, di]);
                    add(&mut xb, &[bi, ii, ni_], l * wb.at(&[di, ni_]));
                    add(&mut xc, &[bi, ii, ni_], l * wxc.at(&[di, ni_]));
                }
            }
            for ri in 0..nr {
                for di in 0..nd {
                    add(
                        &mut ttd,
                        &[bi, ii, ri],
                        lex.at(&[bi, ii, di]) * wdt1.at(&[di, ri]),
                    );
                }
            }
            for di in 0..nd {
                for ri in 0..nr {
                    add(
                        &mut dtp,
                        &[bi, ii, di],
                        ttd.at(&[bi, ii, ri]) * wdt2.at(&[ri, di]),
                    );
                }
                let v = softplus(dtp.at(&[bi, ii, di]) + bdt.at(&[di]));
                set(&mut delta, &[bi, ii, di], v);
            }
        }
    }

    for bi in 0..nb {
        for ii in 0..ni {
            for di in 0..nd {
                for ni_ in 0..nn {
                    let dl = delta.at(&[bi, ii, di]);
                    let ab = (dl * a.at(&[di, ni_])).exp();
                    let bb = dl * xb.at(&[bi, ii, ni_]);
                    let bxv = bb * lex.at(&[bi, ii, di]);
                    let prev = if ii == 0 {
                        h0.at(&[bi, di, ni_])
                    } else {
                        h.at(&[bi, ii - 1, di, ni_])
                    };
                    let hhv = ab * prev;
                    set(&mut abar, &[bi, ii, di, ni_], ab);
                    set(&mut bbar, &[bi, ii, di, ni_], bb);
                    set(&mut bx, &[bi, ii, di, ni_], bxv);
                    set(&mut hh, &[bi, ii, di, ni_], hhv);
                    set(&mut h, &[bi, ii, di, ni_], hhv + bxv);
                }
            }
            for di in 0..nd {
                for ni_ in 0..nn {
                    let v = h.at(&[bi, ii, di, ni_]) * xc.at(&[bi, ii, ni_]);
                    add(&mut s, &[bi, ii, di], v);
                }
                let sdv = s.at(&[bi, ii, di]) + dskip.at(&[di]) * lex.at(&[bi, ii, di]);
                set(&mut sd, &[bi, ii, di], sdv);
                set(&mut y, &[bi, ii, di], sdv * silu(rx.at(&[bi, ii, di])));
            }
            for ei in 0..ne {
                for di in 0..nd {
                    let v = y.at(&[bi, ii, di]) * wout.at(&[di, ei]);
                    add(&mut o, &[bi, ii, ei], v);
                }
            }
        }
    }

    let mut out = store.clone();
    for (name, t) in [
        ("X", x),
        ("SQ", sq),
        ("NUM", num),
        ("MEAN", mean),
        ("SQEX", sqex),
        ("NEX", nex),
        ("TX", tx),
        ("RX", rx),
        ("TTX", ttx),
        ("LEX", lex),
        ("XB", xb),
        ("XC", xc),
        ("TTD", ttd),
        ("DTP", dtp),
        ("DELTA", delta),
        ("ABAR", abar),
        ("BBAR", bbar),
        ("BX", bx),
        ("HH", hh),
        ("H", h),
        ("S", s),
        ("SD", sd),
        ("Y", y),
        ("O", o),
    ] {
        out.insert(name, t);
    }
    out
}

/// Names of the tensors produced by the unmerged layer.
pub const MAMBA_PRODUCED: [&str; 24] = [
    "X", "SQ", "NUM", "MEAN", "SQEX", "NEX", "TX", "RX", "TTX", "LEX", "XB", "XC", "TTD", "DTP",
    "DELTA", "ABAR", "BBAR", "BX", "HH", "H", "S", "SD", "Y", "O",
];

/// Every tensor both stores hold for the given names, compared with the
/// same relative measure the CLI reports.
pub fn rel_err(a: &TensorStore, b: &TensorStore, names: &[&str]) -> f64 {
    einfuse_core::interp::max_rel_error(a, b, names.iter().copied()).expect("comparable stores")
}
