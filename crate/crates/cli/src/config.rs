//! The TOML file shared by every subcommand; each reads its own section.

use std::path::Path;

use nerc_core::bench::ProfileOptions;
use nerc_core::estimate::{EngineConfig, EngineKind};
use nerc_core::sim::ScenarioConfig;
use nerc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NercConfig {
    pub simulate: SimulateSection,
    pub train: TrainConfig,
    /// Engine for `eval` and `serve`.
    pub engine: EngineConfig,
    pub profile: ProfileSection,
    pub map: MapSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    pub days: u32,
    #[serde(flatten)]
    pub scenario: ScenarioConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            days: 3,
            scenario: ScenarioConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSection {
    pub engines: Vec<EngineKind>,
    pub horizons: Vec<usize>,
    #[serde(flatten)]
    pub options: ProfileOptions,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            engines: vec![EngineKind::MheFiltering, EngineKind::MheArrival, EngineKind::MheNoArrival],
            horizons: vec![1, 2, 5, 10, 20, 40, 65],
            options: ProfileOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSection {
    pub resolution_m: f64,
    pub margin_m: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            resolution_m: 2.0,
            margin_m: 50.0,
        }
    }
}

impl NercConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Ok(toml::from_str(&std::fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }
}
