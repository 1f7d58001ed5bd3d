//! Run configuration: one JSON document, unknown keys rejected, every
//! field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block::PetlConfig;
use crate::data::{Geometry, SyntheticSpec};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub width: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub lora_rank: usize,
    pub adapter_bottleneck: usize,
    pub tolerance: f64,
    /// Corrupts the S_p gradient so the suite must fail.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            width: 16,
            heads: 2,
            prefix_len: 3,
            lora_rank: 2,
            adapter_bottleneck: 4,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Wall time makes reports differ run to run, so it is off by default.
    pub record_wall_time: bool,
}

/// Fallback locations for the command-line path flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub backbone: Option<PathBuf>,
    pub delta: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds `seed, seed+1, …` used by multi-seed commands.
    pub num_seeds: usize,
    pub model: ModelConfig,
    pub petl: PetlConfig,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    pub pretrain_data: SyntheticSpec,
    pub downstream_data: SyntheticSpec,
    pub gradcheck: GradcheckConfig,
    pub report: ReportConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_seeds: 3,
            model: ModelConfig::default(),
            petl: PetlConfig::default(),
            pretrain: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            tune: TrainConfig::default(),
            pretrain_data: SyntheticSpec {
                num_identities: 256,
                ..SyntheticSpec::default()
            },
            downstream_data: SyntheticSpec {
                domain_shift: 0.5,
                sample_seed: 99,
                ..SyntheticSpec::default()
            },
            gradcheck: GradcheckConfig::default(),
            report: ReportConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let geo = Geometry::of(&self.model);
        self.pretrain_data.validate(&geo)?;
        self.downstream_data.validate(&geo)?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        if self.num_seeds == 0 {
            return Err(Error::config("num_seeds must be at least 1"));
        }
        let d = self.model.image.d.min(self.model.text.d);
        if self.petl.lora && (self.petl.lora_rank == 0 || self.petl.lora_rank >= d) {
            return Err(Error::config(format!(
                "lora_rank {} must lie in 1..{d}",
                self.petl.lora_rank
            )));
        }
        if self.petl.l_adapter && self.petl.placement.uses_adapter() && self.petl.adapter_bottleneck == 0 {
            return Err(Error::config("adapter_bottleneck must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON of the effective configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.num_seeds as u64).map(move |i| self.seed.wrapping_add(i))
    }
}
