use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cgan::{ArchConfig, TrainConfig};
use crate::embeddings::{encoder_from_recipe, EmbeddingKind};
use crate::error::{Error, Result};
use crate::features::ZPolicy;
use crate::geodata::{Layout, SyntheticWorldSpec, DEFAULT_PATCH_SIZE};
use crate::interp::{DistanceMetric, DEFAULT_SIGMA_KM};
use crate::mapping::Palette;
use crate::probes::{CnnParams, SvmParams};
use crate::rng::derive_seed;

/// Everything one experiment run depends on. Serialised as TOML with one
/// section per module; the root `seed` is the only source of randomness
/// (see [`ExperimentConfig::resolve`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fraction of locations held out for testing.
    pub test_fraction: f64,
    pub dataset: DatasetSource,
    pub embedding: EmbeddingConfig,
    pub cgan: CganConfig,
    pub features: FeatureConfig,
    pub probe: ProbeConfig,
    pub interp: InterpConfig,
    pub mapping: MappingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            test_fraction: 0.2,
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            embedding: EmbeddingConfig::default(),
            cgan: CganConfig::default(),
            features: FeatureConfig::default(),
            probe: ProbeConfig::default(),
            interp: InterpConfig::default(),
            mapping: MappingConfig::default(),
        }
    }
}

/// Where the paired samples come from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    /// A dataset directory previously written by `save_dataset`.
    Manifest { path: PathBuf },
    /// Ground images from a dataset directory; overhead patches re-fetched
    /// from a tile endpoint (or an offline mosaic) at each location.
    Tiles(TileSourceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `checkerboard`, `halves` or `random:<seed>`.
    pub layout: String,
    pub images_per_cell: usize,
    pub patch_size: u32,
    pub cell_km: f64,
    pub heterogeneity: f64,
    pub overhead_ambiguity: f64,
    pub overhead_mix: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            layout: "checkerboard".into(),
            images_per_cell: 10,
            patch_size: DEFAULT_PATCH_SIZE,
            cell_km: 1.0,
            heterogeneity: 0.05,
            overhead_ambiguity: 0.0,
            overhead_mix: 0.55,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, seed: u64) -> Result<SyntheticWorldSpec> {
        let layout: Layout = self.layout.parse()?;
        let mut spec = SyntheticWorldSpec::new(self.grid_h, self.grid_w, layout, self.images_per_cell, seed);
        spec.patch_size = self.patch_size;
        spec.cell_km = self.cell_km;
        spec.heterogeneity = self.heterogeneity;
        spec.overhead_ambiguity = self.overhead_ambiguity;
        spec.overhead_mix = self.overhead_mix;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSourceConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub url_template: Option<String>,
    #[serde(default)]
    pub mosaic: Option<PathBuf>,
    #[serde(default = "default_zoom")]
    pub zoom: u32,
    #[serde(default = "default_fetch_size")]
    pub fetch_size: u32,
    #[serde(default)]
    pub cache_dir: PathBuf,
}

fn default_zoom() -> u32 {
    18
}

fn default_fetch_size() -> u32 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    /// Frozen encoder behind the `cnn` embedding.
    pub encoder: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hsv,
            encoder: "random-conv:seed=0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CganConfig {
    pub ngf: usize,
    pub ndf: usize,
    pub train: TrainConfig,
}

impl Default for CganConfig {
    fn default() -> Self {
        let desk = ArchConfig::desk(1);
        Self {
            ngf: desk.ngf,
            ndf: desk.ndf,
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        }
    }
}

impl CganConfig {
    pub fn arch(&self, nef: usize) -> ArchConfig {
        ArchConfig {
            ngf: self.ngf,
            ndf: self.ndf,
            ..ArchConfig::desk(nef)
        }
    }
}

/// Which discriminator features train the cGAN-feature probe. Test-time
/// features always come from the overhead patch (through the generator),
/// since that is all a map location has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainFeatureSource {
    #[default]
    Generated,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub z_policy: ZPolicy,
    pub train_source: TrainFeatureSource,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            z_policy: ZPolicy::default(),
            train_source: TrainFeatureSource::Generated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub svm: SvmParams,
    pub cnn: CnnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub sigma_km: f64,
    /// Extra bandwidths evaluated by the sweep.
    pub sweep: Vec<f64>,
    /// Fraction of all locations used as sparse anchors for the
    /// interpolated map.
    pub anchor_fraction: f64,
    pub metric: DistanceMetric,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            sigma_km: DEFAULT_SIGMA_KM,
            sweep: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            anchor_fraction: 0.017,
            metric: DistanceMetric::Haversine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub palette: Palette,
    /// Rendered pixels per cell side.
    pub block: u32,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            palette: Palette::default(),
            block: 16,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Overwrite every per-module seed with one derived from the root seed.
    ///
    /// | component       | derivation                 |
    /// |-----------------|----------------------------|
    /// | synthetic world | `derive_seed(seed, "world")` (in the pipeline) |
    /// | split           | `derive_seed(seed, "split")` |
    /// | cGAN training   | `derive_seed(seed, "cgan")` |
    /// | feature z draws | `derive_seed(seed, "z")` |
    /// | SVM             | `derive_seed(seed, "svm")` |
    /// | reference CNN   | `derive_seed(seed, "cnn")` |
    /// | anchors         | `derive_seed(seed, "anchors")` |
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.cgan.train.seed = derive_seed(s, "cgan");
        self.probe.svm.seed = derive_seed(s, "svm");
        self.probe.cnn.seed = derive_seed(s, "cnn");
        self.features.z_policy = match self.features.z_policy {
            ZPolicy::FixedZero => ZPolicy::FixedZero,
            ZPolicy::FixedSeed { .. } => ZPolicy::FixedSeed { seed: derive_seed(s, "z") },
            ZPolicy::AverageOfK { k, .. } => ZPolicy::AverageOfK { k, seed: derive_seed(s, "z") },
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.spec(0)?;
            }
            DatasetSource::Manifest { path } => require_path(path)?,
            DatasetSource::Tiles(t) => {
                require_path(&t.manifest)?;
                match (&t.url_template, &t.mosaic) {
                    (Some(_), None) => {}
                    (None, Some(m)) => require_path(m)?,
                    _ => return Err(Error::config("tile source needs exactly one of url_template or mosaic")),
                }
            }
        }
        if self.embedding.kind == EmbeddingKind::Cnn {
            encoder_from_recipe(&self.embedding.encoder)?;
        }
        self.cgan.arch(self.embedding.kind.nef()).validate()?;
        self.cgan.train.validate()?;
        self.features.z_policy.draws(1)?;
        if !(self.probe.svm.c > 0.0) {
            return Err(Error::config("svm c must be positive"));
        }
        if self.probe.cnn.batch_size < 2 || self.probe.cnn.widths.is_empty() {
            return Err(Error::config("cnn probe needs batch_size >= 2 and at least one stage"));
        }
        for &s in std::iter::once(&self.interp.sigma_km).chain(&self.interp.sweep) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!("interpolation bandwidth must be positive, got {s}")));
            }
        }
        if !(self.interp.anchor_fraction > 0.0 && self.interp.anchor_fraction <= 1.0) {
            return Err(Error::config("anchor_fraction must lie in (0, 1]"));
        }
        if self.mapping.palette.colors.is_empty() {
            return Err(Error::config("palette is empty"));
        }
        Ok(())
    }
}

fn require_path(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(p.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default().resolve();
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn every_source_round_trips() {
        let mut c = ExperimentConfig::default();
        c.dataset = DatasetSource::Manifest { path: "data/x".into() };
        c.features.z_policy = ZPolicy::FixedZero;
        c.cgan.train.max_steps = Some(7);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.dataset = DatasetSource::Tiles(TileSourceConfig {
            manifest: "m".into(),
            url_template: Some("https://t/{lat}/{lon}".into()),
            mosaic: None,
            zoom: 17,
            fetch_size: 32,
            cache_dir: "cache".into(),
        });
        c.probe.svm.gamma = Some(0.5);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[cgan.train]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.cgan.train.learning_rate, 1e-3);
        assert_eq!(c.cgan.train.batch_size, 32);
        assert_eq!(c.embedding.kind, EmbeddingKind::Hsv);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[interp]\nsigma = 2.0\n").is_err());
    }

    #[test]
    fn resolve_derives_module_seeds_from_the_root() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.resolve();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.resolve();
        assert_ne!(a.cgan.train.seed, b.cgan.train.seed);
        assert_eq!(a, a.clone().resolve());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::default();
        c.test_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.dataset = DatasetSource::Manifest { path: "/definitely/not/here".into() };
        assert!(matches!(c.validate(), Err(Error::MissingFile(_))));
        let mut c = ExperimentConfig::default();
        c.interp.sweep.push(0.0);
        assert!(c.validate().is_err());
    }
}
