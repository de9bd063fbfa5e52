use std::collections::BTreeSet;

use einfuse_core::frontend::samples::CHAIN5;
use einfuse_core::frontend::{parse, running_product_text, sample};
use einfuse_core::fusion::{classify_pair, plan, unfused_groups, FusionClass, StitchPolicy};
use einfuse_core::interp::{measure_itf, run, Dense, TensorStore};
use einfuse_core::schedule::{
    check_stationarity, lower_plan, render, unfused_schedule, LowerOptions,
};
use einfuse_core::{Cascade, Error};

fn listing(c: &Cascade, policy: Option<StitchPolicy>) -> String {
    let groups = match policy {
        Some(p) => plan(c, p).groups,
        None => unfused_groups(c),
    };
    render(
        &lower_plan(c, &groups, &LowerOptions::default()).unwrap(),
        c,
    )
}

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn pair_classes_of_the_four_examples() {
    for (name, class) in [
        ("pair-ri", FusionClass::RI),
        ("pair-rsb", FusionClass::RSb),
        ("pair-rsp", FusionClass::RSp),
        ("pair-rd", FusionClass::RD),
    ] {
        let c = sample(name).unwrap();
        assert_eq!(
            classify_pair(&c.einsums[0], &c.einsums[1], &c),
            class,
            "{name}"
        );
        assert_eq!(
            classify_pair(&c.einsums[1], &c.einsums[0], &c),
            FusionClass::NotAdjacent,
            "{name}"
        );
    }
}

#[test]
fn weaker_policies_leave_stronger_classes_apart() {
    let groups = |name: &str, p| plan(&sample(name).unwrap(), p).groups.len();
    assert_eq!(groups("pair-ri", StitchPolicy::RIOnly), 1);
    assert_eq!(groups("pair-rsb", StitchPolicy::RIOnly), 2);
    assert_eq!(groups("pair-rsb", StitchPolicy::RiRsb), 1);
    assert_eq!(groups("pair-rsp", StitchPolicy::RiRsb), 2);
    assert_eq!(groups("pair-rsp", StitchPolicy::RiRsbRsp), 1);
    assert_eq!(groups("pair-rd", StitchPolicy::RiRsb), 2);
}

#[test]
fn elementwise_then_reduce_listing() {
    let c = sample("pair-ri").unwrap();
    assert_eq!(
        listing(&c, None),
        "\
# fusion group 0: E1
# fusion group 1: E2
for m in range(M):
  for n in range(N):
    Z[m,n] = A[m,n] * B[m,n]  # E1
for m in range(M):
  for n in range(N):
    Y[m] += Z[m,n] / C[m]  # E2
"
    );
    assert_eq!(
        listing(&c, Some(StitchPolicy::RIOnly)),
        "\
# fusion group 0: E1 E2
for m in range(M):
  for n in range(N):
    Z_reg = A[m,n] * B[m,n]  # E1
    Y[m] += Z_reg / C[m]  # E2
"
    );
}

#[test]
fn reduction_then_elementwise_listing() {
    let c = sample("pair-rsb").unwrap();
    assert_eq!(
        listing(&c, Some(StitchPolicy::RiRsb)),
        "\
# fusion group 0: E1 E2
for m in range(M):
  for k in range(K):
    Z_reg += A[m,k] * B[k]  # E1
  Y[m] = Z_reg / C[m]  # E2
"
    );
}

#[test]
fn broadcast_consumer_listing() {
    let c = sample("pair-rsp").unwrap();
    assert_eq!(
        listing(&c, Some(StitchPolicy::RiRsbRsp)),
        "\
# fusion group 0: E1 E2
for m in range(M):
  for n in range(N):
    Z_reg = A[m,n] * B[n]  # E1
    for p in range(P):
      Y[m,p] += Z_reg * C[n,p]  # E2
"
    );
}

#[test]
fn chained_products_listing() {
    let c = sample("pair-rd").unwrap();
    assert_eq!(
        listing(&c, Some(StitchPolicy::FullyFused)),
        "\
# fusion group 0: E1 E2
for m in range(M):
  for n in range(N):
    for k in range(K):
      Z_reg += A[m,k] * B[k,n]  # E1
    for p in range(P):
      Y[m,p] += Z_reg * C[n,p]  # E2
"
    );
}

#[test]
fn five_einsum_example_groups_and_chain() {
    let c = sample("chain5").unwrap();
    let p = plan(&c, StitchPolicy::RiRsbRsp);
    let members: Vec<Vec<u32>> = p.groups.iter().map(|g| g.members.clone()).collect();
    assert_eq!(members, vec![vec![1, 2, 3], vec![4, 5]]);
    let chain0: Vec<BTreeSet<String>> = p.groups[0].chain().into_iter().cloned().collect();
    let chain1: Vec<BTreeSet<String>> = p.groups[1].chain().into_iter().cloned().collect();
    assert_eq!(chain0, vec![set(&["M", "N"]), set(&["M", "N", "P"])]);
    assert_eq!(chain1, vec![set(&["N"])]);
    assert_eq!(p.groups[0].stationary, vec!["N", "M"]);
    assert_eq!(p.groups[1].stationary, vec!["N"]);

    let classes: Vec<FusionClass> = p
        .groups
        .iter()
        .flat_map(|g| g.links())
        .map(|l| l.class)
        .collect();
    assert_eq!(
        classes,
        vec![FusionClass::RD, FusionClass::RSp, FusionClass::RSb]
    );
}

#[test]
fn five_einsum_example_listings() {
    let c = sample("chain5").unwrap();
    assert_eq!(
        listing(&c, Some(StitchPolicy::RiRsbRsp)),
        "\
# fusion group 0: E1 E2 E3
# fusion group 1: E4 E5
for n in range(N):
  for m in range(M):
    for k in range(K):
      Z_reg += A[m,k] * B[k,n]  # E1
    for p in range(P):
      Y_reg = Z_reg * C[p]  # E2
      for q in range(Q):
        X[m,n,q] += Y_reg * W[q]  # E3
for n in range(N):
  for m in range(M):
    for q in range(Q):
      V_reg += X[m,n,q] * D[q]  # E4
  U[n] = sigmoid(V_reg)  # E5
"
    );
    assert_eq!(
        listing(&c, Some(StitchPolicy::FullyFused)),
        "\
# fusion group 0: E1 E2 E3 E4 E5
for n in range(N):
  for m in range(M):
    for k in range(K):
      Z_reg += A[m,k] * B[k,n]  # E1
    for p in range(P):
      Y_reg = Z_reg * C[p]  # E2
      for q in range(Q):
        X[m,n,q] += Y_reg * W[q]  # E3
    # Q-fiber of X is ready here (transition to E4)
    for q in range(Q):
      V_reg += X[m,n,q] * D[q]  # E4
  U[n] = sigmoid(V_reg)  # E5
"
    );
}

#[test]
fn fused_schedules_pass_the_stationarity_checker() {
    for name in [
        "pair-ri",
        "pair-rsb",
        "pair-rsp",
        "pair-rd",
        "chain5",
        "running-product",
    ] {
        let c = sample(name).unwrap();
        for p in StitchPolicy::ALL {
            let groups = plan(&c, p).groups;
            let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
            assert!(
                check_stationarity(&c, &groups, &nest).is_empty(),
                "{name} {p}"
            );
        }
    }
}

#[test]
fn fused_intermediates_hold_one_element() {
    for (name, policy) in [
        ("pair-ri", StitchPolicy::RIOnly),
        ("pair-rsb", StitchPolicy::RiRsb),
        ("pair-rsp", StitchPolicy::RiRsbRsp),
        ("pair-rd", StitchPolicy::FullyFused),
    ] {
        let c = sample(name).unwrap();
        let groups = plan(&c, policy).groups;
        assert_eq!(groups.len(), 1, "{name}");
        let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
        let itf = measure_itf(&nest, &c).unwrap();
        assert_eq!(itf.get("Z"), Some(&1), "{name}");
    }
}

#[test]
fn reduction_rank_outside_forces_a_full_column() {
    let c = sample("pair-rsb").unwrap();
    let groups = plan(&c, StitchPolicy::RiRsb).groups;
    let km = LowerOptions {
        order: Some(vec!["K".into(), "M".into()]),
        ..Default::default()
    };
    match lower_plan(&c, &groups, &km) {
        Err(Error::Lowering { rank, .. }) => assert_eq!(rank, "K"),
        other => panic!("expected a stationarity error, got {other:?}"),
    }
    let forced = LowerOptions { force: true, ..km };
    let nest = lower_plan(&c, &groups, &forced).unwrap();
    assert!(!check_stationarity(&c, &groups, &nest).is_empty());
    let itf = measure_itf(&nest, &c).unwrap();
    assert_eq!(itf.get("Z"), Some(&(c.rank_shape("M") as u64)));
    let (a, _) = run(&nest, &c, &TensorStore::synthesize(&c, 1)).unwrap();
    let (b, _) = run(&unfused_schedule(&c), &c, &TensorStore::synthesize(&c, 1)).unwrap();
    assert!(einfuse_core::interp::max_rel_error(&a, &b, ["Y"]).unwrap() <= 1e-12);
}

#[test]
fn crossing_trigger_fires_once_per_fiber() {
    let c = sample("chain5").unwrap();
    let groups = plan(&c, StitchPolicy::FullyFused).groups;
    let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
    let (_, trace) = run(&nest, &c, &TensorStore::synthesize(&c, 0)).unwrap();
    assert_eq!(trace.triggers.len(), 1);
    let t = &trace.triggers[0];
    assert_eq!((t.tensor.as_str(), t.consumer), ("X", 4));
    assert_eq!(t.fires, (c.rank_shape("M") * c.rank_shape("N")) as u64);
    assert_eq!(t.fires, t.expected);
}

#[test]
fn rolled_recurrence_with_unit_inputs_stays_at_one() {
    let c = parse(&running_product_text(6)).unwrap();
    let mut store = TensorStore::synthesize(&c, 0);
    store.insert("A", Dense::filled(&c.shape("A"), |_| 1.0));
    store.insert("B", Dense::filled(&[], |_| 1.0));
    for p in [None, Some(StitchPolicy::RIOnly)] {
        let groups = p.map_or_else(|| unfused_groups(&c), |p| plan(&c, p).groups);
        let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
        let (out, _) = run(&nest, &c, &store).unwrap();
        assert!(out.get("Z").unwrap().data.iter().all(|z| *z == 1.0));
    }
}

#[test]
fn rolled_recurrence_is_a_running_product() {
    let c = parse(&running_product_text(5)).unwrap();
    let store = TensorStore::synthesize(&c, 9);
    let (out, _) = run(&unfused_schedule(&c), &c, &store).unwrap();
    let (a, b) = (store.get("A").unwrap(), store.get("B").unwrap().data[0]);
    let z = out.get("Z").unwrap();
    let mut expect = a.data[0] * b;
    assert_eq!(z.data[0], expect);
    for i in 1..z.data.len() {
        expect *= a.data[i - 1];
        assert_eq!(z.data[i], expect, "Z[{i}]");
    }
}

/// All extents set to four; the expected saving is computed from tensor
/// sizes: every on-chip intermediate skips one write and one read.
#[test]
fn five_einsum_traffic_saving_at_uniform_extent() {
    let text = CHAIN5
        .lines()
        .map(|l| {
            if l.starts_with("rank ") {
                format!("{}(4)", &l[..l.find('(').unwrap()])
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let c = parse(&text).unwrap();
    let totals = |groups: Vec<einfuse_core::fusion::FusionGroup>| {
        let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
        let (_, trace) = run(&nest, &c, &TensorStore::synthesize(&c, 0)).unwrap();
        let analytic = einfuse_core::cost::traffic(&nest, &c).unwrap();
        assert_eq!(analytic.total_reads(), trace.total_reads());
        assert_eq!(analytic.total_writes(), trace.total_writes());
        trace.total_reads() + trace.total_writes()
    };
    let unfused = totals(unfused_groups(&c));
    let fused = totals(plan(&c, StitchPolicy::RiRsbRsp).groups);
    let saved = 2 * (c.size("Z") + c.size("Y") + c.size("V"));
    assert_eq!(unfused - fused, saved);
    assert_eq!(c.size("Z") + c.size("Y") + c.size("V"), 16 + 64 + 4);
}

/// Two projections of one normalized row: the first reduction does not feed
/// the second, so the shared operand stays in a register for both.
#[test]
fn independent_reductions_do_not_force_a_second_pass() {
    let c = parse(
        "\
rank M(3)
rank E(4)
rank D(5)
tensor A : M, E
tensor G : E
tensor W1 : E, D
tensor W2 : E, D
tensor N : M, E
tensor T : M, D
tensor R : M, D
einsum 1: N[m,e] = A[m,e] * G[e]
einsum 2: T[m,d] += N[m,e] * W1[e,d]
einsum 3: R[m,d] += N[m,e] * W2[e,d]
",
    )
    .unwrap();
    let groups = plan(&c, StitchPolicy::RiRsbRsp).groups;
    assert_eq!(groups.len(), 1);
    let nest = lower_plan(&c, &groups, &LowerOptions::default()).unwrap();
    let (out, trace) = run(&nest, &c, &TensorStore::synthesize(&c, 3)).unwrap();
    let (reference, _) = run(&unfused_schedule(&c), &c, &TensorStore::synthesize(&c, 3)).unwrap();
    assert!(einfuse_core::interp::max_rel_error(&out, &reference, ["T", "R"]).unwrap() <= 1e-12);
    assert_eq!(trace.total_writes(), c.size("T") + c.size("R"));
    let traffic = einfuse_core::cost::traffic(&nest, &c).unwrap();
    assert_eq!(traffic.writes.keys().filter(|(_, t)| t == "N").count(), 0);
    assert_eq!(measure_itf(&nest, &c).unwrap().get("N"), Some(&1));
}
