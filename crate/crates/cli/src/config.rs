//! Run configuration: a TOML file whose keys mirror the subcommand flags.
//! Flags given on the command line win over file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatkit::optim::TrainConfig;
use splatkit::surface::ExtractParams;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub depths: Option<PathBuf>,
    pub sky: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Initialization when no model is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub random_kernels: usize,
    pub sh_degree: usize,
    /// Radius of the random-init ball; defaults to half the mean camera
    /// distance to the point nearest all optical axes.
    pub radius: Option<f64>,
    pub sky: bool,
    pub sky_points: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            random_kernels: 0,
            sh_degree: 0,
            radius: None,
            sky: false,
            sky_points: splatkit::sky::DEFAULT_SKY_POINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub opacity: Option<f64>,
    pub mask_fraction: f64,
    pub margin: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            opacity: None,
            mask_fraction: splatkit::optim::density::DEFAULT_MASK_FRACTION,
            margin: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub background: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Steps between checkpoint PLYs; 0 writes only the initial and final ones.
    pub checkpoint_interval: u64,
    pub paths: Paths,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub mesh: ExtractParams,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint_interval: 0,
            paths: Paths::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            mesh: ExtractParams::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Parse TOML text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.message().to_string()))?;
        let p = &mut cfg.paths;
        for slot in [&mut p.model, &mut p.cameras, &mut p.images, &mut p.masks, &mut p.depths, &mut p.sky, &mut p.output] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }
}

/// The path in `slot`, which must exist.
pub fn existing(slot: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = slot
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing {what} path")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

/// Check an optional path exists when given.
pub fn optional_existing(slot: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>, CliError> {
    match slot {
        Some(_) => existing(slot, what).map(Some),
        None => Ok(None),
    }
}
