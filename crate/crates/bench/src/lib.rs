//! Fixed workloads shared by the benchmarks.

use einfuse_core::frontend::{build_mamba1, merge_mamba, ParamSet, Phase};
use einfuse_core::fusion::{plan, FusionGroup, StitchPolicy};
use einfuse_core::interp::TensorStore;
use einfuse_core::Cascade;

/// Merged Mamba-1 layer at the 370M shape used for cost numbers.
pub fn mamba_prefill() -> (ParamSet, Cascade) {
    let p = ParamSet::mamba_370m(64, 2048, Phase::Prefill);
    let c = merge_mamba(&build_mamba1(&p).expect("preset builds"), false).cascade;
    (p, c)
}

/// Tiny merged layer with synthesized inputs, small enough to interpret.
pub fn mamba_tiny() -> (Cascade, TensorStore) {
    let c = merge_mamba(
        &build_mamba1(&ParamSet::tiny()).expect("tiny builds"),
        false,
    )
    .cascade;
    let inputs = TensorStore::synthesize(&c, 0);
    (c, inputs)
}

pub fn groups(c: &Cascade, policy: StitchPolicy) -> Vec<FusionGroup> {
    plan(c, policy).groups
}
