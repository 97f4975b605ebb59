//! Optional TOML configuration file.
//!
//! Each section corresponds to one subcommand and deserializes into that
//! stage's config type with missing fields filled from defaults. Precedence
//! is: CLI flags > config file > built-in defaults; the fully resolved
//! configuration is echoed into the run manifest.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gausssurf::bind::refine::RefineConfig;
use gausssurf::mesh::extract::ExtractConfig;
use gausssurf::regularize::TrainConfig;
use gausssurf::synth::SyntheticSpec;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SyntheticSpec>,
    pub train: Option<TrainConfig>,
    pub extract: Option<ExtractConfig>,
    pub refine: Option<RefineConfig>,
    pub eval: Option<EvalSection>,
}

/// Settings for `eval` without dedicated flags.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Surface samples for the Chamfer/Hausdorff estimate.
    pub geometry_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            geometry_samples: 50_000,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("read config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parse config file {}", path.display()))
}
