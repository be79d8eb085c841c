//! Whole-pipeline configuration, read from a JSON file and overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assets::AssetConfig;
use crate::diffusion::{DenoiserConfig, DiffusionConfig};
use crate::fit::FitConfig;
use crate::gaussian::{DecoderConfig, UvFeaturePlane};
use crate::io::read_json;
use crate::{Error, Result};

/// Environment variable consulted for the thread count when neither a flag
/// nor the configuration sets one.
pub const THREADS_ENV: &str = "E3GEN_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub planes: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Standard deviation of the random initial features.
    pub init_std: f64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            resolution: UvFeaturePlane::DEFAULT_RESOLUTION,
            channels: UvFeaturePlane::DEFAULT_CHANNELS,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            background: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub plane: PlaneConfig,
    pub assets: AssetConfig,
    pub render: RenderConfig,
    pub decoder: DecoderConfig,
    pub fit: FitConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.plane;
        if p.resolution == 0 || p.channels == 0 || !p.channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument("plane needs a positive resolution and an even channel count".into()));
        }
        if !(p.init_std.is_finite() && p.init_std >= 0.0) {
            return Err(Error::InvalidArgument("plane init_std must be non-negative".into()));
        }
        if self.assets.volume_resolution < 8 || self.assets.volume_k == 0 {
            return Err(Error::InvalidArgument("skinning volume needs resolution ≥ 8 and K ≥ 1".into()));
        }
        let r = &self.render;
        if r.width == 0 || r.height == 0 || r.background.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("render size must be positive and the background finite".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("thread count must be positive".into()));
        }
        self.fit.validate()?;
        self.diffusion.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.channels != p.channels {
            return Err(Error::InvalidArgument(format!(
                "denoiser expects {} channels but planes have {}",
                self.denoiser.channels, p.channels
            )));
        }
        Ok(())
    }

    /// Flag, then configuration, then [`THREADS_ENV`]; `None` leaves the
    /// pool at its default size.
    pub fn resolve_threads(&self, flag: Option<usize>) -> Result<Option<usize>> {
        if let Some(n) = flag.or(self.threads) {
            return if n == 0 {
                Err(Error::InvalidArgument("thread count must be positive".into()))
            } else {
                Ok(Some(n))
            };
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::InvalidArgument(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
            },
            Err(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 5, "fit": {"iterations": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.fit.iterations, 10);
        assert_eq!(cfg.fit.lr_plane, FitConfig::default().lr_plane);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 5}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.plane.channels = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.threads = Some(0);
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.render.width = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flag_overrides_config_threads() {
        let cfg = PipelineConfig {
            threads: Some(3),
            ..Default::default()
        };
        assert_eq!(cfg.resolve_threads(Some(2)).unwrap(), Some(2));
        assert_eq!(cfg.resolve_threads(None).unwrap(), Some(3));
        assert!(cfg.resolve_threads(Some(0)).is_err());
    }
}
