use einfuse_core::cost::{
    bind, cycles_per_point, end_to_end, evaluate_variant, geomean, lower_variant, ops_per_point,
    roofline, HardwareConfig, Resource, RooflineOptions, Scenario, Variant, COST_CSV_HEADER,
    UTILIZATION_CSV_HEADER,
};
use einfuse_core::frontend::{build_mamba1, merge_mamba, parse, sample, ParamSet, Phase, GEMM_IDS};
use einfuse_core::fusion::{plan, unfused_groups, StitchPolicy};
use einfuse_core::schedule::{lower_plan, unfused_schedule, LowerOptions};
use einfuse_core::Error;

fn prefill() -> ParamSet {
    ParamSet::mamba_370m(64, 2048, Phase::Prefill)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

#[test]
fn hardware_text_round_trips() {
    let hw = HardwareConfig::default();
    assert_eq!(HardwareConfig::parse(&hw.to_text()).unwrap(), hw);
    let custom = HardwareConfig::parse(
        "# slower memory\nbandwidth_bytes_per_s = 1e12\n\npes_small = 64 # tiny\n",
    )
    .unwrap();
    assert_eq!(custom.bandwidth_bytes_per_s, 1e12);
    assert_eq!(custom.pes_small, 64);
    assert_eq!(custom.pes_2d, hw.pes_2d);
}

#[test]
fn hardware_rejects_bad_values() {
    for text in [
        "pes_2d = 0",
        "clock_hz = -1",
        "pes_1d = 70000",
        "warp_size = 32",
        "pes_2d = many",
        "pes_2d",
    ] {
        assert!(
            matches!(HardwareConfig::parse(text), Err(Error::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn operations_and_cycles_per_point() {
    let c = parse(
        "\
rank M(2)
rank K(2)
tensor A : M, K
tensor B : K
tensor C : M
tensor Z : M
tensor Y : M
tensor X : M
einsum 1: Z[m] += A[m,k] * B[k]
einsum 2: Y[m] = Z[m] / C[m] + Z[m]
einsum 3: X[m] += sigmoid(A[m,k])
",
    )
    .unwrap();
    let (e1, e2, e3) = (&c.einsums[0], &c.einsums[1], &c.einsums[2]);
    assert_eq!((ops_per_point(e1), cycles_per_point(e1)), (2, 1));
    assert_eq!((ops_per_point(e2), cycles_per_point(e2)), (2, 2));
    assert_eq!((ops_per_point(e3), cycles_per_point(e3)), (2, 2));
}

#[test]
fn binding_follows_the_contractions() {
    let base = build_mamba1(&ParamSet::tiny()).unwrap();
    for b in bind(&base, &unfused_groups(&base)) {
        let (id, r) = b.einsums[0];
        let expect = if GEMM_IDS.contains(&id) {
            Resource::Array2D
        } else {
            Resource::Array1D
        };
        assert_eq!(r, expect, "E{id}");
    }
    let merged = merge_mamba(&base, false).cascade;
    let ff = plan(&merged, StitchPolicy::FullyFused).groups;
    let b = &bind(&merged, &ff)[0];
    for (id, r) in &b.einsums {
        let expect = if *id < 7 {
            Resource::Small1D
        } else {
            Resource::Array2D
        };
        assert_eq!(*r, expect, "E{id}");
    }
}

/// One group, checked against a hand computation of the roofline.
#[test]
fn roofline_of_a_single_contraction() {
    let c = sample("pair-rd").unwrap();
    let groups = unfused_groups(&c);
    let nest = unfused_schedule(&c);
    let hw = HardwareConfig {
        pes_2d: 4,
        pes_1d: 2,
        pes_small: 1,
        clock_hz: 1.0,
        bandwidth_bytes_per_s: 2.0,
        ..Default::default()
    };
    let r = roofline(
        &c,
        &groups,
        &nest,
        &hw,
        "unfused",
        Phase::Prefill,
        RooflineOptions::default(),
    )
    .unwrap();
    let g = &r.groups[0];
    // 27 points of one MAC on a 4-PE array; reads A (9) and B (9), writes Z (9).
    assert_eq!(g.flops, 27 * 2);
    assert!(close(g.t_compute_s, 27.0 / 4.0, 1e-12));
    assert_eq!(g.bytes_intra_read + g.bytes_inter_read, 18 * 2);
    assert_eq!(g.bytes_inter_write, 9 * 2);
    assert!(close(g.t_memory_s, 27.0 * 2.0 / 2.0, 1e-12));
    assert_eq!(g.t_end_s, g.t_memory_s.max(g.t_compute_s));
    assert_eq!(r.groups[1].t_start_s, g.t_end_s);
    assert!(close(
        r.latency(),
        r.groups.iter().map(|g| g.latency()).sum(),
        1e-12
    ));
}

#[test]
fn inter_traffic_shrinks_as_policies_widen() {
    let hw = HardwareConfig::default();
    for p in [
        prefill(),
        prefill().with_phase(Phase::Decode, 1),
        ParamSet::tiny(),
    ] {
        let inter: Vec<u64> = [
            Variant::Unfused,
            Variant::Policy(StitchPolicy::RIOnly),
            Variant::Policy(StitchPolicy::RiRsb),
            Variant::Policy(StitchPolicy::RiRsbRsp),
            Variant::Policy(StitchPolicy::FullyFused),
        ]
        .iter()
        .map(|v| evaluate_variant(&p, *v, &hw).unwrap().report.inter_bytes())
        .collect();
        assert!(inter.windows(2).all(|w| w[0] >= w[1]), "{p:?} {inter:?}");
    }
}

#[test]
fn byte_and_time_accounting_is_consistent() {
    let hw = HardwareConfig::default();
    for v in Variant::ALL {
        let r = evaluate_variant(&prefill(), v, &hw).unwrap().report;
        assert_eq!(
            r.read_bytes() + r.write_bytes(),
            r.total_bytes(),
            "{}",
            v.name()
        );
        assert_eq!(
            r.intra_bytes() + r.inter_bytes(),
            r.total_bytes(),
            "{}",
            v.name()
        );
        let mut t = 0.0;
        for g in &r.groups {
            assert_eq!(g.t_start_s, t);
            assert!(g.t_end_s >= g.t_start_s);
            t = g.t_end_s;
        }
        for u in r.utilization() {
            assert!((0.0..=1.0).contains(&u.compute_fraction), "{}", v.name());
            assert!((0.0..=1.0).contains(&u.bandwidth_fraction), "{}", v.name());
        }
    }
}

#[test]
fn ideal_bound_drops_only_inter_traffic() {
    let hw = HardwareConfig::default();
    let r = evaluate_variant(&prefill(), Variant::Unfused, &hw).unwrap();
    assert_eq!(r.ideal.inter_bytes(), 0);
    assert_eq!(r.ideal.intra_bytes(), r.report.intra_bytes());
    assert_eq!(r.ideal.flops(), r.report.flops());
    assert!(r.ideal.latency() <= r.report.latency());
}

#[test]
fn unfused_bytes_are_operand_and_output_sizes() {
    let p = prefill();
    let hw = HardwareConfig::default();
    let base = build_mamba1(&p).unwrap();
    let r = evaluate_variant(&p, Variant::Unfused, &hw).unwrap().report;
    let writes: u64 = base
        .einsums
        .iter()
        .map(|e| base.size(e.output_tensor()))
        .sum();
    let reads: u64 = base
        .einsums
        .iter()
        .flat_map(|e| e.reads().into_iter().map(|t| base.size(t)))
        .sum();
    let h_unread = base.size("H") / p.i as u64;
    assert_eq!(r.write_bytes(), writes * hw.element_bytes);
    assert_eq!(r.read_bytes(), (reads - h_unread) * hw.element_bytes);
}

#[test]
fn baselines_report_capacity_pressure_honestly() {
    let hw = HardwareConfig::default();
    let marca = lower_variant(&prefill(), Variant::MarcaLike, &hw).unwrap();
    let geens = lower_variant(&prefill(), Variant::GeensLike, &hw).unwrap();
    assert!(!marca.nest.warnings.is_empty());
    assert!(marca.nest.groups.iter().any(|g| !g.demoted.is_empty()));
    assert!(geens.nest.groups.iter().all(|g| g.demoted.is_empty()));
    assert_eq!(marca.groups.len(), 19);
    assert_eq!(geens.groups.len(), 19);
}

#[test]
fn csv_headers_and_row_counts() {
    let hw = HardwareConfig::default();
    let r = evaluate_variant(&ParamSet::tiny(), Variant::Policy(StitchPolicy::RiRsb), &hw)
        .unwrap()
        .report;
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(COST_CSV_HEADER));
    assert_eq!(lines.count(), r.groups.len());
    let util = r.utilization_rows();
    assert!(util
        .lines()
        .all(|l| l.split(',').count() == UTILIZATION_CSV_HEADER.split(',').count()));
}

#[test]
fn scenario_totals_scale_with_layers_and_steps() {
    let hw = HardwareConfig::default();
    let base = ParamSet {
        l: 3,
        ..ParamSet::tiny()
    };
    let vs = [Variant::Unfused, Variant::Policy(StitchPolicy::FullyFused)];
    let only_prefill = end_to_end(&base, Scenario::new(8, 0), &vs, &hw).unwrap();
    for (v, tp, td, total) in &only_prefill.rows {
        assert_eq!(*td, 0.0, "{}", v.name());
        assert!(close(*total, 3.0 * tp, 1e-12));
    }
    let mixed = end_to_end(&base, Scenario::new(8, 5), &vs, &hw).unwrap();
    for (_, tp, td, total) in &mixed.rows {
        assert!(close(*total, 3.0 * tp + 5.0 * 3.0 * td, 1e-12));
    }
    let empty = end_to_end(&base, Scenario::new(0, 0), &vs, &hw).unwrap();
    assert!(empty.rows.iter().all(|r| r.3 == 0.0));
    assert!(mixed.speedup(vs[1], vs[0]).unwrap() >= 1.0);
}

#[test]
fn geomean_of_known_values() {
    assert!(close(geomean(&[2.0, 8.0]), 4.0, 1e-12));
    assert!(close(geomean(&[5.0]), 5.0, 1e-12));
    assert!(geomean(&[]).is_nan());
}

#[test]
fn capacity_demotes_oversized_intermediates() {
    let c = sample("chain5").unwrap();
    let groups = plan(&c, StitchPolicy::FullyFused).groups;
    let roomy = lower_plan(&c, &groups, &LowerOptions::with_capacity(1 << 20, 2)).unwrap();
    assert!(roomy.groups.iter().all(|g| g.demoted.is_empty()));
    let tight = lower_plan(&c, &groups, &LowerOptions::with_capacity(1, 2)).unwrap();
    assert!(tight.groups.iter().any(|g| !g.demoted.is_empty()));
    assert!(!tight.warnings.is_empty());
}
