//! The canonical 24-Einsum Mamba-1 layer cascade and its parameter sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::Cascade;

use super::parse::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            _ => Err(Error::Config(format!(
                "unknown phase `{s}` (expected prefill or decode)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSet {
    pub b: usize,
    pub i: usize,
    pub e: usize,
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub w: usize,
    pub l: usize,
    pub phase: Phase,
}

pub const RMS_EPS: f64 = 1e-5;

impl ParamSet {
    /// Named model presets. Batch and sequence length are supplied separately.
    pub fn preset(name: &str, b: usize, i: usize, phase: Phase) -> Result<ParamSet> {
        let (e, d, r, l) = match name {
            "mamba-370m" => (1024, 2048, 64, 48),
            "mamba-2.8b" => (2560, 5120, 160, 64),
            _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
        };
        let i = if phase == Phase::Decode { 1 } else { i };
        let p = ParamSet {
            b,
            i,
            e,
            d,
            n: 16,
            r,
            w: 4,
            l,
            phase,
        };
        p.check()?;
        Ok(p)
    }

    pub fn mamba_370m(b: usize, i: usize, phase: Phase) -> ParamSet {
        ParamSet::preset("mamba-370m", b, i, phase).expect("preset is valid")
    }

    /// Desk-sized shapes used by the equivalence checks.
    pub fn tiny() -> ParamSet {
        ParamSet {
            b: 2,
            i: 8,
            e: 8,
            d: 16,
            n: 4,
            r: 4,
            w: 4,
            l: 1,
            phase: Phase::Prefill,
        }
    }

    /// Same model with the phase switched; decode forces a single-token step.
    pub fn with_phase(self, phase: Phase, prefill_len: usize) -> ParamSet {
        ParamSet {
            i: if phase == Phase::Decode {
                1
            } else {
                prefill_len
            },
            phase,
            ..self
        }
    }

    pub fn check(&self) -> Result<()> {
        let dims = [
            self.b, self.i, self.e, self.d, self.n, self.r, self.w, self.l,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("every dimension must be at least 1".into()));
        }
        if self.phase == Phase::Decode && self.i != 1 {
            return Err(Error::Config("decode requires I = 1".into()));
        }
        Ok(())
    }

    /// Parses `k=v` pairs, e.g. `preset=mamba-370m,B=64,I=2048,phase=prefill`.
    /// Keys not given fall back to the preset (default mamba-370m) and B=64, I=2048.
    pub fn from_pairs(text: &str) -> Result<ParamSet> {
        let mut preset = "mamba-370m".to_string();
        let mut phase = Phase::Prefill;
        let mut kv = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{part}`")))?;
            match k.trim() {
                "preset" => preset = v.trim().to_string(),
                "phase" => phase = v.trim().parse()?,
                key => {
                    let n: usize = v.trim().parse().map_err(|_| {
                        Error::Config(format!("`{key}` needs a positive integer, got `{v}`"))
                    })?;
                    kv.push((key.to_string(), n));
                }
            }
        }
        let mut p = ParamSet::preset(&preset, 64, 2048, Phase::Prefill)?;
        p.phase = phase;
        for (k, v) in kv {
            match k.as_str() {
                "B" | "b" => p.b = v,
                "I" | "i" => p.i = v,
                "E" | "e" => p.e = v,
                "D" | "d" => p.d = v,
                "N" | "n" => p.n = v,
                "R" | "r" => p.r = v,
                "W" | "w" => p.w = v,
                "L" | "l" => p.l = v,
                _ => return Err(Error::Config(format!("unknown parameter `{k}`"))),
            }
        }
        if phase == Phase::Decode {
            p.i = 1;
        }
        p.check()?;
        Ok(p)
    }
}

/// Einsum ids whose bodies are plain two-operand contractions.
pub const GEMM_IDS: [u32; 7] = [7, 8, 11, 12, 13, 14, 24];

/// Shared-input sets merged before stitching.
pub const MERGE_SETS: [&[u32]; 3] = [&[7, 8], &[11, 12, 13], &[16, 17]];

/// Description text of the layer for a parameter set.
pub fn mamba1_text(p: &ParamSet) -> String {
    let ParamSet {
        b,
        i,
        e,
        d,
        n,
        r,
        w,
        ..
    } = *p;
    format!(
        "\
# Mamba-1 layer: residual add, RMSNorm, projections, causal conv, selective scan, gating.
rank B({b})
rank I({i}) generational step=1 stop={i}
rank E({e})
rank D({d})
rank N({n})
rank R({r})
rank W({w})
tensor HIN : B, I, E
tensor RES : B, I, E
tensor G : E
tensor WIN : E, D
tensor WRES : E, D
tensor WCONV : D, W
tensor WB : D, N
tensor WXC : D, N
tensor WDT1 : D, R
tensor WDT2 : R, D
tensor BDT : D
tensor A : D, N
tensor H0 : B, D, N
tensor DSKIP : D
tensor WOUT : D, E
tensor X : B, I, E
tensor SQ : B, I, E
tensor NUM : B, I
tensor MEAN : B, I
tensor SQEX : B, I
tensor NEX : B, I, E
tensor TX : B, I, D
tensor RX : B, I, D
tensor TTX : B, I, D
tensor LEX : B, I, D
tensor XB : B, I, N
tensor XC : B, I, N
tensor TTD : B, I, R
tensor DTP : B, I, D
tensor DELTA : B, I, D
tensor ABAR : B, I, D, N
tensor BBAR : B, I, D, N
tensor BX : B, I, D, N
tensor HH : B, I, D, N
tensor H : B, I, D, N
tensor S : B, I, D
tensor SD : B, I, D
tensor Y : B, I, D
tensor O : B, I, E
input A uniform(-1, 0)
input WDT1 uniform(-0.1, 0.1)
input WDT2 uniform(-0.1, 0.1)
input H0 const(0)
einsum 1: X[b,i,e] = HIN[b,i,e] + RES[b,i,e]
einsum 2: SQ[b,i,e] = square(X[b,i,e])
einsum 3: NUM[b,i] += SQ[b,i,e]
einsum 4: MEAN[b,i] = NUM[b,i] / {e}
einsum 5: SQEX[b,i] = rsqrt(MEAN[b,i] + {eps})
einsum 6: NEX[b,i,e] = X[b,i,e] * SQEX[b,i] * G[e]
einsum 7: TX[b,i,d] += NEX[b,i,e] * WIN[e,d]
einsum 8: RX[b,i,d] += NEX[b,i,e] * WRES[e,d]
einsum 9: TTX[b,i,d] += TX[b,i-w,d] * WCONV[d,w]
einsum 10: LEX[b,i,d] = silu(TTX[b,i,d])
einsum 11: XB[b,i,n] += LEX[b,i,d] * WB[d,n]
einsum 12: XC[b,i,n] += LEX[b,i,d] * WXC[d,n]
einsum 13: TTD[b,i,r] += LEX[b,i,d] * WDT1[d,r]
einsum 14: DTP[b,i,d] += TTD[b,i,r] * WDT2[r,d]
einsum 15: DELTA[b,i,d] = softplus(DTP[b,i,d] + BDT[d])
einsum 16: ABAR[b,i,d,n] = exp(DELTA[b,i,d] * A[d,n])
einsum 17: BBAR[b,i,d,n] = DELTA[b,i,d] * XB[b,i,n]
einsum 18: BX[b,i,d,n] = BBAR[b,i,d,n] * LEX[b,i,d]
einsum 19: HH[b,i,d,n] = ABAR[b,i,d,n] * H[b,i-1,d,n]
init: HH[b,0,d,n] = ABAR[b,0,d,n] * H0[b,d,n]
einsum 20: H[b,i,d,n] = HH[b,i,d,n] + BX[b,i,d,n]
einsum 21: S[b,i,d] += H[b,i,d,n] * XC[b,i,n]
einsum 22: SD[b,i,d] = S[b,i,d] + DSKIP[d] * LEX[b,i,d]
einsum 23: Y[b,i,d] = SD[b,i,d] * silu(RX[b,i,d])
einsum 24: O[b,i,e] += Y[b,i,d] * WOUT[d,e]
",
        eps = RMS_EPS
    )
}

pub fn build_mamba1(p: &ParamSet) -> Result<Cascade> {
    p.check()?;
    parse(&mamba1_text(p))
}
