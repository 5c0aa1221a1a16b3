//! The pipeline configuration file.
//!
//! Precedence, lowest first: built-in defaults, the TOML file, the
//! `TMR_CACHE_DIR` environment variable (cache root only), command-line
//! flags. Relative paths in the file are resolved against its directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trademark_attention::dataset::SynthesisConfig;
use trademark_attention::features::MethodConfig;
use trademark_attention::hard_attention::AtrhaConfig;
use trademark_attention::segmenter::{SegTrainConfig, UnetArch};
use trademark_attention::soft_attention::{CamArch, CamTrainConfig, CamsaParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Manifest of the images to index.
    pub catalog: Option<PathBuf>,
    /// Manifest with `relevant_ids` on the queries.
    pub eval: Option<PathBuf>,
    /// PTL manifest the segmenter is trained on.
    pub ptl: Option<PathBuf>,
    /// Labelled catalog the CAM training split is drawn from.
    pub type_catalog: Option<PathBuf>,
    /// Images the whitening is fitted on; the catalog when unset.
    pub whitening_set: Option<PathBuf>,
    /// Holds `segmenter/`, `cam/` and the fitted whitenings.
    pub models: PathBuf,
    pub cache: PathBuf,
    pub reports: PathBuf,
    /// Safetensors VGG-16 weights; the seeded random stub backbone when unset.
    pub backbone_weights: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            catalog: None,
            eval: None,
            ptl: None,
            type_catalog: None,
            whitening_set: None,
            models: "models".into(),
            cache: "cache".into(),
            reports: "reports".into(),
            backbone_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSettings {
    pub ssa_offset: f32,
    pub rmac_scales: usize,
    pub whitening_dims: usize,
    /// Cap on vectors the whitening is fitted on.
    pub whitening_samples: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            ssa_offset: 0.5,
            rmac_scales: 4,
            whitening_dims: 512,
            whitening_samples: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamSettings {
    #[serde(flatten)]
    pub train: CamTrainConfig,
    pub per_class: usize,
    pub validation_total: usize,
}

impl Default for CamSettings {
    fn default() -> Self {
        Self {
            train: CamTrainConfig::default(),
            per_class: 2000,
            validation_total: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub k: usize,
    pub exclude_self: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: 100,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seed for everything not seeded in a section of its own.
    pub seed: u64,
    pub paths: Paths,
    pub method: MethodConfig,
    pub features: FeatureSettings,
    pub synthesis: SynthesisConfig,
    pub segmenter: SegTrainConfig,
    pub cam: CamSettings,
    pub camsa: CamsaParams,
    pub atrha: AtrhaConfig,
    pub eval: EvalSettings,
}

impl PipelineConfig {
    /// Small models and 64 px synthetics, sized for a CPU-only run.
    pub fn desk() -> Self {
        let mut config = Self::default();
        config.synthesis.canvas = 64;
        config.segmenter.arch = UnetArch::desk();
        config.segmenter.epochs = 30;
        config.segmenter.patience = 5;
        config.cam.train.arch = CamArch::desk();
        config.cam.train.epochs = 10;
        config.cam.per_class = 300;
        config.cam.validation_total = 90;
        config.features.whitening_dims = 64;
        config.features.whitening_samples = 20_000;
        config
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing pipeline config")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing pipeline config")
    }

    /// Reads `path` and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_relative(base);
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for opt in [
            &mut p.catalog,
            &mut p.eval,
            &mut p.ptl,
            &mut p.type_catalog,
            &mut p.whitening_set,
            &mut p.backbone_weights,
            &mut self.segmenter.log_path,
            &mut self.cam.train.pretrained_trunk,
        ] {
            if let Some(path) = opt.as_mut() {
                fix(path);
            }
        }
        fix(&mut p.models);
        fix(&mut p.cache);
        fix(&mut p.reports);
    }

    pub fn segmenter_dir(&self) -> PathBuf {
        self.paths.models.join("segmenter")
    }

    pub fn cam_dir(&self) -> PathBuf {
        self.paths.models.join("cam")
    }

    pub fn whitening_path(&self, method: &MethodConfig, fingerprint: &str) -> PathBuf {
        self.paths.models.join(format!("whitening-{}-{fingerprint}.json", method.tag()))
    }
}

/// Fails with a readable message unless `path` is set and exists.
pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path
        .clone()
        .with_context(|| format!("no {what} given (set it in the config or pass it as a flag)"))?;
    anyhow::ensure!(path.exists(), "{what} {} does not exist", path.display());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let config = PipelineConfig::default();
        let text = config.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), config);
    }

    #[test]
    fn desk_preset_round_trips() {
        let config = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_toml(&config.to_toml().unwrap()).unwrap(), config);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let config = PipelineConfig::from_toml("seed = 3\n[method]\npooling = \"SPOC\"\nwhitening = true\n").unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.method.tag(), "SPOC_PCAW");
        assert_eq!(config.eval.k, 100);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut config = PipelineConfig::default();
        config.paths.catalog = Some("cat/manifest.jsonl".into());
        config.resolve_relative(Path::new("/work"));
        assert_eq!(config.paths.catalog.unwrap(), Path::new("/work/cat/manifest.jsonl"));
        assert_eq!(config.paths.cache, Path::new("/work/cache"));
    }
}
