//! Analytic traffic and roofline latency of fused schedules.

mod traffic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use traffic::{traffic, Traffic};

use crate::error::{Error, Result};
use crate::frontend::{build_mamba1, merge_mamba, ParamSet, Phase};
use crate::fusion::{
    plan, stitch_region, unfused_groups, FusionGroup, ResidencyKind, StitchPolicy,
};
use crate::ir::{BinOp, Cascade, EinsumDecl, EinsumId, Expr};
use crate::schedule::{lower_plan, LoopNest, LowerOptions};

/// Accelerator parameters used by the roofline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardwareConfig {
    pub bandwidth_bytes_per_s: f64,
    pub clock_hz: f64,
    pub pes_2d: u64,
    pub ops_per_cycle: u64,
    pub pes_1d: u64,
    pub pes_small: u64,
    pub global_buffer_bytes: u64,
    pub register_bytes: u64,
    pub element_bytes: u64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            bandwidth_bytes_per_s: 2039e9,
            clock_hz: 1.75e9,
            pes_2d: 65536,
            ops_per_cycle: 2,
            pes_1d: 8192,
            pes_small: 256,
            global_buffer_bytes: 32 * 1024 * 1024,
            register_bytes: 4_456_448,
            element_bytes: 2,
        }
    }
}

const HW_KEYS: [&str; 9] = [
    "bandwidth_bytes_per_s",
    "clock_hz",
    "pes_2d",
    "ops_per_cycle",
    "pes_1d",
    "pes_small",
    "global_buffer_bytes",
    "register_bytes",
    "element_bytes",
];

impl HardwareConfig {
    /// Reads `key = value` lines; `#` starts a comment and missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<HardwareConfig> {
        let mut hw = HardwareConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let float = || {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: `{k}` needs a number", n + 1)))
            };
            let int = || {
                v.parse::<u64>().map_err(|_| {
                    Error::Config(format!(
                        "line {}: `{k}` needs a non-negative integer",
                        n + 1
                    ))
                })
            };
            match k {
                "bandwidth_bytes_per_s" => hw.bandwidth_bytes_per_s = float()?,
                "clock_hz" => hw.clock_hz = float()?,
                "pes_2d" => hw.pes_2d = int()?,
                "ops_per_cycle" => hw.ops_per_cycle = int()?,
                "pes_1d" => hw.pes_1d = int()?,
                "pes_small" => hw.pes_small = int()?,
                "global_buffer_bytes" => hw.global_buffer_bytes = int()?,
                "register_bytes" => hw.register_bytes = int()?,
                "element_bytes" => hw.element_bytes = int()?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{k}` (known: {})",
                        n + 1,
                        HW_KEYS.join(", ")
                    )))
                }
            }
        }
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_text(&self) -> String {
        format!(
            "bandwidth_bytes_per_s = {}\nclock_hz = {}\npes_2d = {}\nops_per_cycle = {}\npes_1d = {}\npes_small = {}\nglobal_buffer_bytes = {}\nregister_bytes = {}\nelement_bytes = {}\n",
            self.bandwidth_bytes_per_s,
            self.clock_hz,
            self.pes_2d,
            self.ops_per_cycle,
            self.pes_1d,
            self.pes_small,
            self.global_buffer_bytes,
            self.register_bytes,
            self.element_bytes
        )
    }

    pub fn validate(&self) -> Result<()> {
        let floats = [self.bandwidth_bytes_per_s, self.clock_hz];
        if floats.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Config("bandwidth and clock must be positive".into()));
        }
        let ints = [
            self.pes_2d,
            self.ops_per_cycle,
            self.pes_1d,
            self.pes_small,
            self.global_buffer_bytes,
            self.register_bytes,
            self.element_bytes,
        ];
        if ints.contains(&0) {
            return Err(Error::Config(
                "every hardware quantity must be positive".into(),
            ));
        }
        if self.pes_1d > self.pes_2d {
            return Err(Error::Config(format!(
                "the 1D mode uses a subset of the 2D array: {} > {}",
                self.pes_1d, self.pes_2d
            )));
        }
        Ok(())
    }

    pub fn pes(&self, r: Resource) -> u64 {
        match r {
            Resource::Array2D => self.pes_2d,
            Resource::Array1D => self.pes_1d,
            Resource::Small1D => self.pes_small,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Resource {
    Array2D,
    Array1D,
    Small1D,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Array2D => "2d",
            Resource::Array1D => "1d",
            Resource::Small1D => "small-1d",
        })
    }
}

/// Compute resource chosen for each Einsum of a group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupBinding {
    pub group: usize,
    pub einsums: Vec<(EinsumId, Resource)>,
    pub rationale: String,
}

/// GEMMs take the 2D array. A group without a GEMM runs in 1D mode.
/// Inside a group with a GEMM, elementwise work ahead of the first GEMM goes to
/// the small array and work after it shares the 2D array.
pub fn bind(c: &Cascade, groups: &[FusionGroup]) -> Vec<GroupBinding> {
    groups
        .iter()
        .map(|g| {
            let gemm = |id: &EinsumId| c.einsum(*id).is_some_and(EinsumDecl::is_gemm_like);
            let first = g.members.iter().position(gemm);
            let einsums = g
                .members
                .iter()
                .enumerate()
                .map(|(k, id)| {
                    let r = match first {
                        _ if gemm(id) => Resource::Array2D,
                        None => Resource::Array1D,
                        Some(f) if k < f => Resource::Small1D,
                        Some(_) => Resource::Array2D,
                    };
                    (*id, r)
                })
                .collect();
            let rationale = match first {
                None => "elementwise only: 1D mode",
                Some(0) => "GEMM-led: 2D array",
                Some(_) => "elementwise feeding a GEMM: small array",
            };
            GroupBinding {
                group: g.id,
                einsums,
                rationale: rationale.into(),
            }
        })
        .collect()
}

/// Arithmetic operations per iteration point, counting the accumulate.
pub fn ops_per_point(e: &EinsumDecl) -> u64 {
    e.body.op_count() + u64::from(e.accumulate)
}

/// Cycles per point on one PE. A multiply feeding an accumulate issues as a
/// single fused MAC.
pub fn cycles_per_point(e: &EinsumDecl) -> u64 {
    let ops = e.body.op_count();
    match (&e.body, e.accumulate) {
        (Expr::Binary(BinOp::Mul, _, _), true) => ops,
        (_, true) => ops + 1,
        (_, false) => ops.max(1),
    }
}

fn points(c: &Cascade, e: &EinsumDecl) -> u64 {
    e.rank_names()
        .iter()
        .map(|r| c.rank(r).map_or(1, |d| d.trip_count() as u64))
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    Compute,
    Memory,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::Compute => "compute",
            Bound::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCost {
    pub group_id: usize,
    pub einsum_ids: Vec<EinsumId>,
    pub bound: Bound,
    pub flops: u64,
    pub bytes_intra_read: u64,
    pub bytes_intra_write: u64,
    pub bytes_inter_read: u64,
    pub bytes_inter_write: u64,
    /// Extra reads of in-group intermediates on later passes.
    pub bytes_multipass: u64,
    /// Backing-store round trips of intermediates produced and consumed in the group.
    pub bytes_spill: u64,
    pub t_compute_s: f64,
    pub t_memory_s: f64,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub resource: String,
}

impl GroupCost {
    pub fn bytes_intra(&self) -> u64 {
        self.bytes_intra_read + self.bytes_intra_write
    }
    pub fn bytes_read(&self) -> u64 {
        self.bytes_intra_read + self.bytes_inter_read
    }
    pub fn bytes_write(&self) -> u64 {
        self.bytes_intra_write + self.bytes_inter_write
    }
    pub fn bytes_total(&self) -> u64 {
        self.bytes_intra() + self.bytes_inter_read + self.bytes_inter_write
    }
    pub fn latency(&self) -> f64 {
        self.t_end_s - self.t_start_s
    }
}

/// One row of the utilization-over-time trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationRow {
    pub group_id: usize,
    pub einsum_ids: Vec<EinsumId>,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub compute_fraction: f64,
    pub bandwidth_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub phase: Phase,
    pub groups: Vec<GroupCost>,
    pub warnings: Vec<String>,
}

pub const COST_CSV_HEADER: &str = "variant,phase,group_id,einsum_ids,bound,flops,bytes_intra,bytes_inter_read,bytes_inter_write,t_compute_s,t_memory_s,t_start_s,t_end_s";
pub const UTILIZATION_CSV_HEADER: &str =
    "variant,phase,group_id,einsum_ids,t_start_s,t_end_s,compute_fraction,bandwidth_fraction";

fn ids(v: &[EinsumId]) -> String {
    v.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl CostReport {
    pub fn latency(&self) -> f64 {
        self.groups.iter().map(GroupCost::latency).sum()
    }
    pub fn inter_bytes(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| g.bytes_inter_read + g.bytes_inter_write)
            .sum()
    }
    pub fn intra_bytes(&self) -> u64 {
        self.groups.iter().map(GroupCost::bytes_intra).sum()
    }
    pub fn read_bytes(&self) -> u64 {
        self.groups.iter().map(GroupCost::bytes_read).sum()
    }
    pub fn write_bytes(&self) -> u64 {
        self.groups.iter().map(GroupCost::bytes_write).sum()
    }
    pub fn total_bytes(&self) -> u64 {
        self.groups.iter().map(GroupCost::bytes_total).sum()
    }
    pub fn flops(&self) -> u64 {
        self.groups.iter().map(|g| g.flops).sum()
    }

    pub fn utilization(&self) -> Vec<UtilizationRow> {
        self.groups
            .iter()
            .map(|g| {
                let span = g.latency();
                let frac = |t: f64| {
                    if span > 0.0 {
                        (t / span).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                };
                UtilizationRow {
                    group_id: g.group_id,
                    einsum_ids: g.einsum_ids.clone(),
                    t_start_s: g.t_start_s,
                    t_end_s: g.t_end_s,
                    compute_fraction: frac(g.t_compute_s),
                    bandwidth_fraction: frac(g.t_memory_s),
                }
            })
            .collect()
    }

    /// Rows without a header, in the column order of [`COST_CSV_HEADER`].
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{:e},{:e},{:e},{:e}\n",
                self.variant,
                self.phase,
                g.group_id,
                ids(&g.einsum_ids),
                g.bound,
                g.flops,
                g.bytes_intra(),
                g.bytes_inter_read,
                g.bytes_inter_write,
                g.t_compute_s,
                g.t_memory_s,
                g.t_start_s,
                g.t_end_s
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{COST_CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn utilization_rows(&self) -> String {
        let mut s = String::new();
        for u in self.utilization() {
            s += &format!(
                "{},{},{},{},{:e},{:e},{:.6},{:.6}\n",
                self.variant,
                self.phase,
                u.group_id,
                ids(&u.einsum_ids),
                u.t_start_s,
                u.t_end_s,
                u.compute_fraction,
                u.bandwidth_fraction
            );
        }
        s
    }
}

/// Options for turning a nest into a report.
#[derive(Debug, Clone, Copy, Default)]
pub struct RooflineOptions {
    /// Drop every inter-Einsum byte (the ideal-fusion bound).
    pub ideal: bool,
}

/// Traffic, binding and roofline for a lowered nest. Groups run back to back.
pub fn roofline(
    c: &Cascade,
    groups: &[FusionGroup],
    nest: &LoopNest,
    hw: &HardwareConfig,
    variant: &str,
    phase: Phase,
    opts: RooflineOptions,
) -> Result<CostReport> {
    hw.validate()?;
    let t = traffic(nest, c)?;
    let binding = bind(c, groups);
    let width = hw.element_bytes;
    let mut rows = Vec::new();
    let mut clock = 0.0;
    for (g, b) in groups.iter().zip(&binding) {
        let sched = nest.group(g.id);
        let mut busy: BTreeMap<Resource, f64> = BTreeMap::new();
        let mut flops = 0u64;
        for (id, r) in &b.einsums {
            let e = c
                .einsum(*id)
                .ok_or_else(|| Error::Exec(format!("unknown E{id}")))?;
            let n = points(c, e);
            flops += n * ops_per_point(e);
            let cycles = n as f64 * cycles_per_point(e) as f64;
            *busy.entry(*r).or_default() += cycles / (hw.pes(*r) as f64 * hw.clock_hz);
        }
        let get = |r| busy.get(&r).copied().unwrap_or(0.0);
        // The 1D mode borrows 2D-array PEs; the small array runs alongside.
        let t_compute =
            (get(Resource::Array2D) + get(Resource::Array1D)).max(get(Resource::Small1D));

        let (mut ir, mut iw, mut xr, mut xw, mut multi, mut spill) =
            (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
        for ((gid, pass, name), n) in &t.reads {
            if *gid != g.id {
                continue;
            }
            let bytes = n * width;
            if c.is_shared(name) {
                xr += bytes;
            } else {
                ir += bytes;
            }
            if *pass > 0 {
                multi += bytes;
            }
            let local = c
                .producer(name)
                .is_some_and(|p| g.contains(c.einsums[p].id));
            let spilled = sched
                .and_then(|s| s.residency.get(name))
                .is_some_and(|r| matches!(r.kind, ResidencyKind::Spilled { .. }));
            if local && spilled {
                spill += bytes;
            }
        }
        for ((gid, name), n) in &t.writes {
            if *gid != g.id {
                continue;
            }
            let bytes = n * width;
            if c.is_shared(name) {
                xw += bytes;
            } else {
                iw += bytes;
            }
            let spilled = sched
                .and_then(|s| s.residency.get(name))
                .is_some_and(|r| matches!(r.kind, ResidencyKind::Spilled { .. }));
            if spilled {
                spill += bytes;
            }
        }
        if opts.ideal {
            xr = 0;
            xw = 0;
        }
        let t_memory = (ir + iw + xr + xw) as f64 / hw.bandwidth_bytes_per_s;
        let latency = t_compute.max(t_memory);
        let resources: BTreeSet<String> = b.einsums.iter().map(|(_, r)| r.to_string()).collect();
        rows.push(GroupCost {
            group_id: g.id,
            einsum_ids: g.members.clone(),
            bound: if t_compute >= t_memory {
                Bound::Compute
            } else {
                Bound::Memory
            },
            flops,
            bytes_intra_read: ir,
            bytes_intra_write: iw,
            bytes_inter_read: xr,
            bytes_inter_write: xw,
            bytes_multipass: multi,
            bytes_spill: spill,
            t_compute_s: t_compute,
            t_memory_s: t_memory,
            t_start_s: clock,
            t_end_s: clock + latency,
            resource: resources.into_iter().collect::<Vec<_>>().join("+"),
        });
        clock += latency;
    }
    Ok(CostReport {
        variant: variant.to_string(),
        phase,
        groups: rows,
        warnings: nest.warnings.clone(),
    })
}

/// Schedules compared on the Mamba layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Variant {
    Unfused,
    /// Unfused except the selective scan, fused with whole-tensor tiles per step.
    MarcaLike,
    /// Unfused except the selective scan, fused with the state tiled along D and N.
    GeensLike,
    Policy(StitchPolicy),
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Unfused,
        Variant::MarcaLike,
        Variant::GeensLike,
        Variant::Policy(StitchPolicy::RIOnly),
        Variant::Policy(StitchPolicy::RiRsb),
        Variant::Policy(StitchPolicy::RiRsbRsp),
        Variant::Policy(StitchPolicy::FullyFused),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unfused => "unfused",
            Variant::MarcaLike => "marca",
            Variant::GeensLike => "geens",
            Variant::Policy(p) => p.name(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unfused" => Ok(Variant::Unfused),
            "marca" | "marca-like" => Ok(Variant::MarcaLike),
            "geens" | "geens-like" => Ok(Variant::GeensLike),
            other => other.parse().map(Variant::Policy).map_err(|_| {
                Error::Config(format!(
                    "unknown policy `{other}` (expected one of unfused, marca, geens, ri, ri-rsb, ri-rsb-rsp, fully-fused)"
                ))
            }),
        }
    }
}

/// The selective-scan Einsums fused by both baselines.
pub const SCAN_REGION: [EinsumId; 6] = [16, 17, 18, 19, 20, 21];

/// A variant's cascade, groups and nest, ready for costing or interpretation.
#[derive(Debug, Clone)]
pub struct Lowered {
    pub cascade: Cascade,
    pub groups: Vec<FusionGroup>,
    pub nest: LoopNest,
}

/// Builds and lowers the Mamba layer under a variant. Baselines keep the
/// unmerged cascade; stitching policies run on the merged one.
pub fn lower_variant(p: &ParamSet, v: Variant, hw: &HardwareConfig) -> Result<Lowered> {
    let base = build_mamba1(p)?;
    let cap = LowerOptions::with_capacity(hw.register_bytes, hw.element_bytes);
    let (cascade, groups, opts) = match v {
        Variant::Unfused => {
            let g = unfused_groups(&base);
            (base, g, LowerOptions::default())
        }
        Variant::MarcaLike => {
            let g = stitch_region(&base, &SCAN_REGION, StitchPolicy::RIOnly);
            let tiles = [("B", p.b), ("D", p.d), ("N", p.n)]
                .map(|(r, n)| (r.to_string(), n))
                .into();
            let order = Some(["I", "B", "D", "N"].map(String::from).to_vec());
            (
                base,
                g,
                LowerOptions {
                    tiles,
                    order,
                    ..cap
                },
            )
        }
        Variant::GeensLike => {
            let g = stitch_region(&base, &SCAN_REGION, StitchPolicy::RIOnly);
            let opts = geens_options(&base, &g, p, &cap)?;
            (base, g, opts)
        }
        Variant::Policy(pol) => {
            let m = merge_mamba(&base, false).cascade;
            let g = plan(&m, pol).groups;
            (m, g, cap)
        }
    };
    let nest = lower_plan(&cascade, &groups, &opts)?;
    Ok(Lowered {
        cascade,
        groups,
        nest,
    })
}

/// D-major, N-next state tiling: starts from whole D and N and halves D, then
/// N, until no intermediate of the scan group is demoted.
fn geens_options(
    c: &Cascade,
    groups: &[FusionGroup],
    p: &ParamSet,
    cap: &LowerOptions,
) -> Result<LowerOptions> {
    let order = Some(["D", "N", "I", "B"].map(String::from).to_vec());
    let (mut dt, mut nt) = (p.d, p.n);
    loop {
        let tiles = [("B", p.b), ("D", dt), ("N", nt)]
            .map(|(r, n)| (r.to_string(), n))
            .into();
        let opts = LowerOptions {
            tiles,
            order: order.clone(),
            ..cap.clone()
        };
        let nest = lower_plan(c, groups, &opts)?;
        if nest.groups.iter().all(|g| g.demoted.is_empty()) || (dt == 1 && nt == 1) {
            return Ok(opts);
        }
        if dt > 1 {
            dt = dt.div_ceil(2);
        } else {
            nt = nt.div_ceil(2);
        }
    }
}

/// Report of a variant and of the same schedule with inter-Einsum traffic removed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub report: CostReport,
    pub ideal: CostReport,
}

pub fn evaluate_variant(p: &ParamSet, v: Variant, hw: &HardwareConfig) -> Result<VariantReport> {
    let l = lower_variant(p, v, hw)?;
    let run = |ideal| {
        roofline(
            &l.cascade,
            &l.groups,
            &l.nest,
            hw,
            v.name(),
            p.phase,
            RooflineOptions { ideal },
        )
    };
    Ok(VariantReport {
        report: run(false)?,
        ideal: run(true)?,
    })
}

/// Context length and number of generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub prefill_len: usize,
    pub decode_steps: usize,
}

impl Scenario {
    pub fn new(prefill_len: usize, decode_steps: usize) -> Scenario {
        Scenario {
            name: format!("ctx{prefill_len}-gen{decode_steps}"),
            prefill_len,
            decode_steps,
        }
    }
}

/// Long-context, balanced and long-generation workloads.
pub fn standard_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new(2048, 128),
        Scenario::new(1024, 1024),
        Scenario::new(128, 2048),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    /// `(variant, prefill layer latency, decode layer latency, total latency)`.
    pub rows: Vec<(Variant, f64, f64, f64)>,
}

impl ScenarioResult {
    pub fn total(&self, v: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == v).map(|r| r.3)
    }

    pub fn speedup(&self, v: Variant, over: Variant) -> Option<f64> {
        Some(self.total(over)? / self.total(v)?)
    }
}

/// Whole-model latency: `L` prefill layers plus `steps × L` decode layers.
pub fn end_to_end(
    base: &ParamSet,
    scenario: Scenario,
    variants: &[Variant],
    hw: &HardwareConfig,
) -> Result<ScenarioResult> {
    let prefill = base.with_phase(Phase::Prefill, scenario.prefill_len.max(1));
    let decode = base.with_phase(Phase::Decode, 1);
    let l = base.l as f64;
    let mut rows = Vec::new();
    for v in variants {
        let tp = if scenario.prefill_len == 0 {
            0.0
        } else {
            evaluate_variant(&prefill, *v, hw)?.report.latency()
        };
        let td = if scenario.decode_steps == 0 {
            0.0
        } else {
            evaluate_variant(&decode, *v, hw)?.report.latency()
        };
        rows.push((*v, tp, td, l * tp + scenario.decode_steps as f64 * l * td));
    }
    Ok(ScenarioResult { scenario, rows })
}

pub fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}
