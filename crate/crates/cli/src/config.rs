//! Versioned experiment configuration read from TOML.
//!
//! Every section is optional and falls back to the defaults documented in
//! `config/reference.toml`; unknown keys are errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trajcl::synthgen::WorldConfig;
use trajcl::trainer::TrainConfig;
use trajcl::trajdata::PartitionConfig;

pub const CONFIG_VERSION: u32 = 1;

/// The reference file, embedded so `trajcl defaults` can print it.
pub const REFERENCE_TOML: &str = include_str!("../config/reference.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "PartitionConfig::geolife")]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub runs: RunsSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Dataset locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub raw: Option<String>,
    pub features: Option<String>,
    pub grid: Option<String>,
    pub instances: Option<String>,
    pub train: Option<String>,
    pub val: Option<String>,
    pub test: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub cell_size_m: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { cell_size_m: 200.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunsSection {
    /// Seeds `seed, seed + 1, …` averaged by `ablate` and `sweep`.
    pub count: usize,
}

impl Default for RunsSection {
    fn default() -> Self {
        Self { count: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub k_zones: usize,
    pub spurious_rate: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Full world description; overrides `k_zones` and `spurious_rate` when present.
    pub world: Option<WorldConfig>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            k_zones: 3,
            spurious_rate: 0.9,
            n_train: 4000,
            n_val: 500,
            n_test: 1000,
            world: None,
        }
    }
}

impl SynthSection {
    pub fn world_config(&self, seed: u64) -> WorldConfig {
        match &self.world {
            Some(w) => WorldConfig { seed, ..w.clone() },
            None => WorldConfig::default_for(seed, self.k_zones, self.spurious_rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k: Vec<usize>,
    pub d: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k: vec![10, 25, 50, 75],
            d: vec![16, 32, 64, 128],
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            partition: PartitionConfig::geolife(),
            grid: GridSection::default(),
            split: SplitSection::default(),
            train: TrainConfig::default(),
            runs: RunsSection::default(),
            synth: SynthSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid experiment config")?;
        if cfg.version != CONFIG_VERSION {
            bail!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            );
        }
        cfg.partition.validate()?;
        cfg.train.validate()?;
        if cfg.runs.count == 0 {
            bail!("runs.count must be at least 1");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Loads `path` or falls back to defaults, then applies a seed override.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
