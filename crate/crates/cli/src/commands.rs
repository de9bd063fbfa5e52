use std::fmt::Write as _;

use einfuse_core::cost::{
    end_to_end, evaluate_variant, geomean, lower_variant, roofline, standard_scenarios, CostReport,
    HardwareConfig, Lowered, RooflineOptions, Scenario, Variant, COST_CSV_HEADER, SCAN_REGION,
    UTILIZATION_CSV_HEADER,
};
use einfuse_core::frontend::{parse_unchecked, Phase};
use einfuse_core::fusion::{
    plan, stitch_region, unfused_groups, FusionGroup, FusionPlan, StitchPolicy,
};
use einfuse_core::interp::{max_rel_error, run as interpret, TensorStore};
use einfuse_core::schedule::{
    check_stationarity, lower_plan, render, unfused_schedule, LowerOptions,
};
use einfuse_core::{validate, Cascade};

use crate::error::CliError;
use crate::opts::{Opts, Workload};
use crate::output::Sink;

const POLICIES: [Variant; 4] = [
    Variant::Policy(StitchPolicy::RIOnly),
    Variant::Policy(StitchPolicy::RiRsb),
    Variant::Policy(StitchPolicy::RiRsbRsp),
    Variant::Policy(StitchPolicy::FullyFused),
];

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

/// Statement points above which `run` refuses to interpret.
const INTERPRET_LIMIT: u64 = 200_000_000;

pub fn validate_cmd(o: &Opts, out: &mut String) -> Result<(), CliError> {
    let (name, cascade) = match (&o.cascade, &o.builtin) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let c = parse_unchecked(&text)?;
            let diags = validate(&c);
            if !diags.is_empty() {
                for d in &diags {
                    let _ = writeln!(out, "{d}");
                }
                return Err(einfuse_core::Error::Invalid(diags).into());
            }
            (path.display().to_string(), c)
        }
        _ => {
            let w = o.load()?;
            let name = o.builtin.clone().unwrap_or_default();
            (name, w.reference().clone())
        }
    };
    let _ = writeln!(
        out,
        "valid: {name}: {} ranks, {} tensors, {} einsums",
        cascade.ranks.len(),
        cascade.tensors.len(),
        cascade.einsums.len()
    );
    Ok(())
}

fn groups_for(w: &Workload, v: Variant) -> Result<(Cascade, Vec<FusionGroup>), CliError> {
    match (w, v) {
        (_, Variant::Unfused) => Ok((w.reference().clone(), unfused_groups(w.reference()))),
        (Workload::Mamba { base, .. }, Variant::MarcaLike | Variant::GeensLike) => Ok((
            base.clone(),
            stitch_region(base, &SCAN_REGION, StitchPolicy::RIOnly),
        )),
        (Workload::Plain { .. }, Variant::MarcaLike | Variant::GeensLike) => Err(CliError::Usage(
            format!("the {v} baseline is defined for the Mamba layer only"),
        )),
        (_, Variant::Policy(p)) => Ok((w.stitched().clone(), plan(w.stitched(), p).groups)),
    }
}

fn lower_for(w: &Workload, v: Variant, hw: &HardwareConfig) -> Result<Lowered, CliError> {
    match w {
        Workload::Mamba { params, .. } => Ok(lower_variant(params, v, hw)?),
        Workload::Plain { .. } => {
            let (cascade, groups) = groups_for(w, v)?;
            let opts = match v {
                Variant::Unfused => LowerOptions::default(),
                _ => LowerOptions::with_capacity(hw.register_bytes, hw.element_bytes),
            };
            let nest = lower_plan(&cascade, &groups, &opts)?;
            Ok(Lowered {
                cascade,
                groups,
                nest,
            })
        }
    }
}

pub fn stitch_cmd(o: &Opts, sink: &Sink, out: &mut String) -> Result<(), CliError> {
    let w = o.load()?;
    for v in o.variants(&POLICIES)? {
        let (_, groups) = groups_for(&w, v)?;
        let p = FusionPlan {
            policy: v.name().to_string(),
            groups,
        };
        out.push_str(&p.render());
        sink.file(&format!("plan-{v}.json"), p.to_json().as_bytes())?;
    }
    Ok(())
}

pub fn lower_cmd(o: &Opts, sink: &Sink, out: &mut String) -> Result<(), CliError> {
    let w = o.load()?;
    let hw = o.hardware()?;
    let mut failures = Vec::new();
    for v in o.variants(&POLICIES)? {
        let l = lower_for(&w, v, &hw)?;
        let mut text = format!("# policy {v}\n");
        for warn in &l.nest.warnings {
            let _ = writeln!(text, "# warning: {warn}");
        }
        text += &render(&l.nest, &l.cascade);
        let violations = check_stationarity(&l.cascade, &l.groups, &l.nest);
        for x in &violations {
            let _ = writeln!(text, "# violation in group {}: {}", x.group, x.message);
            failures.push(format!("{v}: {}", x.message));
        }
        out.push_str(&text);
        sink.file(&format!("nest-{v}.txt"), text.as_bytes())?;
        sink.file(&format!("nest-{v}.json"), l.nest.to_json().as_bytes())?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::check("stationarity", failures.join("; ")))
    }
}

fn iteration_points(c: &Cascade) -> u64 {
    c.einsums
        .iter()
        .map(|e| {
            e.rank_names()
                .iter()
                .map(|r| c.rank(r).map_or(1, |d| d.trip_count() as u64))
                .product::<u64>()
        })
        .sum()
}

pub fn run_cmd(o: &Opts, sink: &Sink, out: &mut String) -> Result<(), CliError> {
    let w = o.load()?;
    let hw = o.hardware()?;
    let reference = w.reference();
    let points = iteration_points(reference);
    if points > INTERPRET_LIMIT {
        return Err(CliError::Usage(format!(
            "{points} iteration points is too many to interpret; pass --tiny or smaller --params"
        )));
    }
    let store = TensorStore::synthesize(reference, o.seed);
    let (expected, _) = interpret(&unfused_schedule(reference), reference, &store)?;
    let mut failures = Vec::new();
    for v in o.variants(&POLICIES)? {
        let l = lower_for(&w, v, &hw)?;
        let inputs = TensorStore::synthesize(&l.cascade, o.seed);
        let (got, trace) = interpret(&l.nest, &l.cascade, &inputs)?;
        let names: Vec<&str> = reference
            .einsums
            .iter()
            .map(|e| e.output.tensor.as_str())
            .filter(|t| l.cascade.producer(t).is_some())
            .collect();
        let err = max_rel_error(&got, &expected, names.iter().copied())?;
        let violations = check_stationarity(&l.cascade, &l.groups, &l.nest);
        let bad_triggers: Vec<String> = trace
            .triggers
            .iter()
            .filter(|t| t.fires != t.expected)
            .map(|t| {
                format!(
                    "trigger {}->E{} fired {} of {}",
                    t.tensor, t.consumer, t.fires, t.expected
                )
            })
            .collect();
        if err <= EQUIVALENCE_TOLERANCE {
            let _ = writeln!(
                out,
                "{v}: EQUIVALENT (max rel err ≤ 1e−10), measured {err:.3e}"
            );
        } else {
            let _ = writeln!(out, "{v}: MISMATCH (max rel err {err:.3e} > 1e−10)");
            failures.push(format!("{v}: max rel err {err:.3e}"));
        }
        for x in &violations {
            failures.push(format!("{v}: {}", x.message));
        }
        failures.extend(bad_triggers.into_iter().map(|t| format!("{v}: {t}")));
        let csv = trace.to_csv();
        if sink.has_dir() {
            sink.file(&format!("trace-{v}.csv"), csv.as_bytes())?;
            let mut dump = Vec::new();
            got.write_dump(names.iter().copied(), &mut dump)?;
            sink.file(&format!("outputs-{v}.eint"), &dump)?;
        } else {
            out.push_str(&csv);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::check("equivalence", failures.join("; ")))
    }
}

/// Cost reports for every requested variant and phase, followed by the
/// ideal bound of the unfused schedule.
fn reports(
    o: &Opts,
    w: &Workload,
    hw: &HardwareConfig,
    variants: &[Variant],
) -> Result<Vec<CostReport>, CliError> {
    let mut all = Vec::new();
    match w {
        Workload::Mamba { params, .. } => {
            for phase in o.phases()? {
                let p = params.with_phase(phase, params.i);
                for v in variants {
                    all.push(evaluate_variant(&p, *v, hw)?.report);
                }
                let mut ideal = evaluate_variant(&p, Variant::Unfused, hw)?.ideal;
                ideal.variant = "ideal".into();
                all.push(ideal);
            }
        }
        Workload::Plain { .. } => {
            for v in variants {
                let l = lower_for(w, *v, hw)?;
                let opts = RooflineOptions::default();
                all.push(roofline(
                    &l.cascade,
                    &l.groups,
                    &l.nest,
                    hw,
                    v.name(),
                    Phase::Prefill,
                    opts,
                )?);
            }
        }
    }
    Ok(all)
}

fn cost_files(all: &[CostReport]) -> (String, String) {
    let mut cost = format!("{COST_CSV_HEADER}\n");
    let mut util = format!("{UTILIZATION_CSV_HEADER}\n");
    for r in all {
        cost += &r.csv_rows();
        util += &r.utilization_rows();
    }
    (cost, util)
}

pub fn cost_cmd(o: &Opts, sink: &Sink, out: &mut String) -> Result<(), CliError> {
    let w = o.load()?;
    let hw = o.hardware()?;
    let defaults: Vec<Variant> = match w {
        Workload::Mamba { .. } => Variant::ALL.to_vec(),
        Workload::Plain { .. } => std::iter::once(Variant::Unfused).chain(POLICIES).collect(),
    };
    let all = reports(o, &w, &hw, &o.variants(&defaults)?)?;
    let (cost, util) = cost_files(&all);
    if sink.has_dir() {
        sink.file("cost.csv", cost.as_bytes())?;
        sink.file("utilization.csv", util.as_bytes())?;
        let _ = writeln!(
            out,
            "{:<12} {:<8} {:>6} {:>12} {:>14} {:>14}",
            "variant", "phase", "groups", "latency_s", "inter_bytes", "intra_bytes"
        );
        for r in &all {
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:>6} {:>12.4e} {:>14} {:>14}",
                r.variant,
                r.phase,
                r.groups.len(),
                r.latency(),
                r.inter_bytes(),
                r.intra_bytes()
            );
        }
    } else {
        out.push_str(&cost);
    }
    Ok(())
}

fn parse_scenarios(text: Option<&str>) -> Result<Vec<Scenario>, CliError> {
    match text {
        None | Some("default") => Ok(standard_scenarios()),
        Some(list) => list
            .split(',')
            .map(|item| {
                let (a, b) = item.split_once(':').ok_or_else(|| {
                    CliError::Usage(format!("scenario `{item}` is not context:generated"))
                })?;
                let num = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Usage(format!("scenario `{item}` needs integers")))
                };
                Ok(Scenario::new(num(a)?, num(b)?))
            })
            .collect(),
    }
}

pub fn compare_cmd(o: &Opts, sink: &Sink, out: &mut String) -> Result<(), CliError> {
    let w = o.load()?;
    let Workload::Mamba { params, .. } = &w else {
        return Err(CliError::Usage("compare runs on --builtin mamba1".into()));
    };
    let hw = o.hardware()?;
    let mut variants = o.variants(&Variant::ALL)?;
    if !variants.contains(&Variant::Unfused) {
        variants.insert(0, Variant::Unfused);
    }
    let all = reports(o, &w, &hw, &variants)?;

    let mut table = String::from(
        "variant,phase,groups,latency_s,speedup,inter_bytes,inter_reduction,intra_bytes\n",
    );
    let _ = writeln!(
        out,
        "per-layer latency (B={} I={} E={} D={})",
        params.b, params.i, params.e, params.d
    );
    let _ = writeln!(
        out,
        "{:<12} {:<8} {:>6} {:>12} {:>9} {:>10}",
        "variant", "phase", "groups", "latency_s", "speedup", "inter_red"
    );
    for r in &all {
        let Some(base) = all
            .iter()
            .find(|x| x.phase == r.phase && x.variant == "unfused")
        else {
            continue;
        };
        let speedup = base.latency() / r.latency();
        let reduction = if r.inter_bytes() == 0 {
            f64::INFINITY
        } else {
            base.inter_bytes() as f64 / r.inter_bytes() as f64
        };
        let _ = writeln!(
            out,
            "{:<12} {:<8} {:>6} {:>12.4e} {:>8.2}x {:>9.2}x",
            r.variant,
            r.phase,
            r.groups.len(),
            r.latency(),
            speedup,
            reduction
        );
        let _ = writeln!(
            table,
            "{},{},{},{:e},{:.6},{},{:.6},{}",
            r.variant,
            r.phase,
            r.groups.len(),
            r.latency(),
            speedup,
            r.inter_bytes(),
            reduction,
            r.intra_bytes()
        );
    }

    let scenarios = parse_scenarios(o.scenarios.as_deref())?;
    let mut sc = String::from("scenario,prefill_len,decode_steps,variant,prefill_layer_s,decode_layer_s,total_s,speedup\n");
    let _ = writeln!(out, "\nend to end over {} layers", params.l);
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for s in &scenarios {
        let res = end_to_end(params, s.clone(), &variants, &hw)?;
        let _ = write!(out, "{:<18}", s.name);
        for (k, (v, tp, td, total)) in res.rows.iter().enumerate() {
            let speedup = res.speedup(*v, Variant::Unfused).unwrap_or(f64::NAN);
            per_variant[k].push(speedup);
            let _ = write!(out, " {v}={speedup:.2}x");
            let _ = writeln!(
                sc,
                "{},{},{},{v},{tp:e},{td:e},{total:e},{speedup:.6}",
                s.name, s.prefill_len, s.decode_steps
            );
        }
        let _ = writeln!(out);
    }
    let _ = write!(out, "{:<18}", "geomean");
    for (v, xs) in variants.iter().zip(&per_variant) {
        let _ = write!(out, " {v}={:.2}x", geomean(xs));
    }
    let _ = writeln!(out);

    let (cost, util) = cost_files(&all);
    sink.file("compare.csv", table.as_bytes())?;
    sink.file("scenarios.csv", sc.as_bytes())?;
    sink.file("cost.csv", cost.as_bytes())?;
    sink.file("utilization.csv", util.as_bytes())?;
    Ok(())
}
