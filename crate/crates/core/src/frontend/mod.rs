//! Text front end, the built-in cascades and shared-input merging.

pub mod mamba;
pub mod merge;
pub mod parse;
pub mod samples;

pub use mamba::{build_mamba1, mamba1_text, ParamSet, Phase, GEMM_IDS, MERGE_SETS, RMS_EPS};
pub use merge::{merge_shared_inputs, MergeOutcome};
pub use parse::{parse, parse_unchecked, to_text};
pub use samples::{running_product_text, sample, sample_text, BUILTIN_SAMPLES};

use crate::ir::Cascade;

/// Merges the standard shared-input sets of the Mamba-1 layer. The
/// discretization pair {16, 17} is only attempted when asked for; its bodies
/// differ, so it is always reported back as rejected.
pub fn merge_mamba(c: &Cascade, try_discretization: bool) -> MergeOutcome {
    let sets: Vec<Vec<u32>> = MERGE_SETS
        .iter()
        .filter(|s| try_discretization || s[0] != 16)
        .map(|s| s.to_vec())
        .collect();
    merge_shared_inputs(c, &sets)
}
