use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use einfuse_core::cost::{HardwareConfig, Variant};
use einfuse_core::frontend::{
    build_mamba1, merge_mamba, parse, sample, ParamSet, Phase, BUILTIN_SAMPLES,
};
use einfuse_core::Cascade;

use crate::error::CliError;

/// Flags shared by every command. The same struct is the body of a run manifest.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Opts {
    /// Built-in cascade: mamba1, pair-ri, pair-rsb, pair-rsp, pair-rd, chain5 or running-product.
    #[arg(long, conflicts_with = "cascade")]
    pub builtin: Option<String>,

    /// Cascade description file.
    #[arg(long)]
    pub cascade: Option<PathBuf>,

    /// Mamba parameters as k=v pairs, e.g. preset=mamba-370m,B=64,I=2048.
    #[arg(long)]
    pub params: Option<String>,

    /// Use the small Mamba shapes (B=2 I=8 E=8 D=16 N=4 R=4 W=4).
    #[arg(long, conflicts_with = "params")]
    pub tiny: bool,

    /// Policies or baselines, comma separated:
    /// unfused, marca, geens, ri, ri-rsb, ri-rsb-rsp, fully-fused.
    #[arg(long, value_delimiter = ',')]
    pub policy: Vec<String>,

    /// Hardware config file with key = value lines.
    #[arg(long)]
    pub hw: Option<PathBuf>,

    /// prefill, decode or both.
    #[arg(long)]
    pub phase: Option<String>,

    /// `default` for the three standard workloads, or context:generated pairs such as 2048:128,128:2048.
    #[arg(long)]
    pub scenarios: Option<String>,

    /// Directory for CSV, JSON and listing files.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Print failures as a JSON object on stdout.
    #[arg(long)]
    pub error_json: bool,
}

/// Everything needed to repeat a command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    #[serde(flatten)]
    pub opts: Opts,
}

pub enum Workload {
    Mamba {
        params: ParamSet,
        base: Cascade,
        merged: Cascade,
    },
    Plain {
        cascade: Cascade,
    },
}

impl Workload {
    /// The cascade the stitcher sees: shared-input merged for the Mamba layer.
    pub fn stitched(&self) -> &Cascade {
        match self {
            Workload::Mamba { merged, .. } => merged,
            Workload::Plain { cascade, .. } => cascade,
        }
    }

    pub fn reference(&self) -> &Cascade {
        match self {
            Workload::Mamba { base, .. } => base,
            Workload::Plain { cascade, .. } => cascade,
        }
    }
}

impl Opts {
    pub fn params(&self) -> Result<ParamSet, CliError> {
        if self.tiny {
            return Ok(ParamSet::tiny());
        }
        Ok(ParamSet::from_pairs(self.params.as_deref().unwrap_or(""))?)
    }

    pub fn is_mamba(&self) -> bool {
        matches!(self.builtin.as_deref(), Some("mamba1" | "mamba"))
    }

    pub fn load(&self) -> Result<Workload, CliError> {
        match (&self.builtin, &self.cascade) {
            (Some(_), _) if self.is_mamba() => {
                let params = self.params()?;
                let base = build_mamba1(&params)?;
                let merged = merge_mamba(&base, false).cascade;
                Ok(Workload::Mamba {
                    params,
                    base,
                    merged,
                })
            }
            (Some(name), _) => {
                if self.params.is_some() || self.tiny {
                    return Err(CliError::Usage(
                        "--params and --tiny apply only to --builtin mamba1".into(),
                    ));
                }
                if !BUILTIN_SAMPLES.contains(&name.as_str()) {
                    return Err(CliError::Usage(format!(
                        "unknown builtin `{name}` (known: mamba1, {})",
                        BUILTIN_SAMPLES.join(", ")
                    )));
                }
                Ok(Workload::Plain {
                    cascade: sample(name)?,
                })
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                Ok(Workload::Plain {
                    cascade: parse(&text)?,
                })
            }
            (None, None) => Err(CliError::Usage(
                "give --builtin NAME or --cascade FILE".into(),
            )),
        }
    }

    pub fn variants(&self, default: &[Variant]) -> Result<Vec<Variant>, CliError> {
        if self.policy.is_empty() {
            return Ok(default.to_vec());
        }
        self.policy
            .iter()
            .map(|p| {
                p.trim()
                    .parse::<Variant>()
                    .map_err(|e| CliError::Usage(e.to_string()))
            })
            .collect()
    }

    pub fn hardware(&self) -> Result<HardwareConfig, CliError> {
        match &self.hw {
            None => Ok(HardwareConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                HardwareConfig::parse(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn phases(&self) -> Result<Vec<Phase>, CliError> {
        match self.phase.as_deref() {
            None | Some("both") => Ok(vec![Phase::Prefill, Phase::Decode]),
            Some(p) => Ok(vec![p
                .parse()
                .map_err(|e: einfuse_core::Error| CliError::Usage(e.to_string()))?]),
        }
    }
}
