//! Optional TOML run configuration. Every field is optional; command-line
//! flags override it and built-in defaults fill whatever is left.

use std::path::Path;

use s2i_core::capsule::CapsuleConfig;
use s2i_core::features::HacConfig;
use s2i_core::nmf::NmfConfig;
use s2i_core::posteriorgram::SynthesisConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenSection,
    pub experiment: ExperimentSection,
    pub nmf: Option<NmfConfig>,
    pub capsule: Option<CapsuleConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub grammar: Option<String>,
    pub speakers: Option<usize>,
    pub utts: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub concentration: Option<f64>,
    /// Frame timing; its `confusion_noise` is overridden by `noise`.
    pub synthesis: Option<SynthesisConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub decoder: Option<String>,
    pub delays: Option<HacConfig>,
    pub delay_sets: Option<Vec<HacConfig>>,
    pub blocks: Option<usize>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub sizes: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
    }
}
