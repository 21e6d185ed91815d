//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::BASE_VOXEL_SIZE;
use crate::gma::{DEFAULT_RADIUS, DEFAULT_SAMPLES};
use crate::harness::{SceneKind, SceneSpec};
use crate::voxelgrid::GridBounds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness for generation, sampling, and splits.
    pub rng_seed: u64,
    pub channels: usize,
    pub num_scales: usize,
    pub base_voxel_size: [f64; 3],
    pub grid: GridBounds,
    pub scene: SceneSource,
    pub mdu: MduConfig,
    pub gma: GmaConfig,
    /// Directory of parameter fixtures; generated from `rng_seed` when unset.
    pub fixtures_dir: Option<PathBuf>,
    pub holdout_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            channels: 4,
            num_scales: 4,
            base_voxel_size: BASE_VOXEL_SIZE,
            grid: GridBounds::default(),
            scene: SceneSource::default(),
            mdu: MduConfig::default(),
            gma: GmaConfig::default(),
            fixtures_dir: None,
            holdout_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSource {
    pub path: Option<PathBuf>,
    pub generate: Option<GenerateConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub instances: usize,
    pub points_per_instance: usize,
    pub spread: f64,
    /// `"ellipsoid"` or `"planar"`.
    pub kind: SceneFamily,
    /// Layers per instance for planar scenes.
    pub layers: usize,
}

/// Scene family name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFamily {
    Ellipsoid,
    Planar,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            instances: 10,
            points_per_instance: 200,
            spread: 1.0,
            kind: SceneFamily::Ellipsoid,
            layers: 2,
        }
    }
}

impl GenerateConfig {
    pub fn to_spec(&self, channels: usize, rng_seed: u64) -> SceneSpec {
        let kind = match self.kind {
            SceneFamily::Ellipsoid => SceneKind::Ellipsoid,
            SceneFamily::Planar => SceneKind::Planar { layers: self.layers },
        };
        SceneSpec::new(self.instances, self.points_per_instance, self.spread, rng_seed)
            .with_kind(kind)
            .with_channels(channels)
    }

    /// Parses `gen:key=value,...` scene descriptors, e.g.
    /// `gen:instances=10,points=200,spread=1.0,kind=planar,layers=2`.
    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("gen:")
            .ok_or_else(|| Error::invalid(format!("scene descriptor must start with 'gen:', got {s:?}")))?;
        let mut g = GenerateConfig::default();
        for part in body.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got {part:?}")))?;
            let bad = || Error::invalid(format!("bad value for {key}: {value:?}"));
            match key.trim() {
                "instances" => g.instances = value.trim().parse().map_err(|_| bad())?,
                "points" | "points_per_instance" => g.points_per_instance = value.trim().parse().map_err(|_| bad())?,
                "spread" => g.spread = value.trim().parse().map_err(|_| bad())?,
                "layers" => g.layers = value.trim().parse().map_err(|_| bad())?,
                "kind" => {
                    g.kind = match value.trim() {
                        "ellipsoid" => SceneFamily::Ellipsoid,
                        "planar" => SceneFamily::Planar,
                        _ => return Err(bad()),
                    }
                }
                other => return Err(Error::invalid(format!("unknown scene key {other:?}"))),
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MduConfig {
    pub seeds_per_instance: usize,
    pub k: usize,
}

impl Default for MduConfig {
    fn default() -> Self {
        Self {
            seeds_per_instance: 50,
            k: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmaConfig {
    pub l: usize,
    pub radius_voxels: f64,
    /// Per-scale overrides.
    #[serde(rename = "scale")]
    pub scales: Vec<GmaScaleOverride>,
}

impl Default for GmaConfig {
    fn default() -> Self {
        Self {
            l: DEFAULT_SAMPLES,
            radius_voxels: DEFAULT_RADIUS,
            scales: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmaScaleOverride {
    pub scale: usize,
    pub l: Option<usize>,
    pub radius_voxels: Option<f64>,
}

impl GmaConfig {
    /// `(l, radius)` for one scale after applying overrides.
    pub fn for_scale(&self, scale: usize) -> (usize, f64) {
        self.scales
            .iter()
            .filter(|o| o.scale == scale)
            .fold((self.l, self.radius_voxels), |(l, r), o| {
                (o.l.unwrap_or(l), o.radius_voxels.unwrap_or(r))
            })
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.mdu.k == 0 || self.mdu.seeds_per_instance == 0 {
            return Err(Error::invalid("mdu.k and mdu.seeds_per_instance must be at least 1"));
        }
        if self.channels == 0 || self.num_scales == 0 {
            return Err(Error::invalid("channels and num_scales must be at least 1"));
        }
        if self.base_voxel_size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("base_voxel_size components must be positive"));
        }
        for s in 0..self.num_scales {
            let (l, r) = self.gma.for_scale(s);
            if l == 0 || !(r >= 0.0) {
                return Err(Error::invalid(format!("scale {s}: gma.l must be >= 1 and radius >= 0")));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction must lie in (0, 1)"));
        }
        if (0..3).any(|i| !(self.grid.min[i] < self.grid.max[i])) {
            return Err(Error::invalid("grid bounds must have min < max on every axis"));
        }
        Ok(())
    }
}
