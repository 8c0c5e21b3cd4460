use std::path::Path;

use flexmv_core::diffusion::{DEFAULT_GUIDANCE, DEFAULT_SAMPLING_STEPS};
use flexmv_core::evalkit::{EvalMode, Split};
use flexmv_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Sampling settings shared by `sample` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLING_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub modes: Vec<EvalMode>,
    pub split: Split,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            modes: EvalMode::ALL.to_vec(),
            split: Split::HeldOut,
        }
    }
}

/// Contents of a `--config` file. Every table and key is optional; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sample: SampleSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
