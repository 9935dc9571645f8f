//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use rwenas_core::data::{synth_blobs, ImageDataset, SynthConfig};
use rwenas_core::genome::{SearchSpace, SpaceKind};
use rwenas_core::moea::SearchConfig;
use rwenas_core::netgraph::ScaleConfig;
use rwenas_core::rwe::RweConfig;
use serde::{Deserialize, Serialize};

use crate::cifar;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", if path.is_empty() { "config" } else { path.as_str() })]
    Parse { path: String, message: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceChoice {
    #[default]
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Random-weight evaluation on the configured dataset.
    #[default]
    Rwe,
    /// Accuracy lookup in the configured benchmark table.
    Table,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: Option<PathBuf>,
    /// Use only the first `limit` training images.
    pub limit: Option<usize>,
    pub classes: usize,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    pub colour: f32,
    pub texture: f32,
    pub noise: f32,
    pub random_phase: bool,
    pub valid_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = SynthConfig::blobs(4, 10_000, 32, 0);
        DataConfig {
            source: DataSource::Synthetic,
            dir: None,
            limit: None,
            classes: synth.classes,
            n: synth.n,
            resolution: synth.resolution,
            seed: synth.seed,
            colour: synth.colour,
            texture: synth.texture,
            noise: synth.noise,
            random_phase: synth.random_phase,
            valid_fraction: 0.2,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            n: self.n,
            resolution: self.resolution,
            seed: self.seed,
            colour: self.colour,
            texture: self.texture,
            noise: self.noise,
            random_phase: self.random_phase,
        }
    }

    /// Loads, splits and standardizes with training-split statistics.
    pub fn load(&self) -> Result<ImageDataset, String> {
        let raw = match self.source {
            DataSource::Synthetic => synth_blobs(&self.synth()).map_err(|e| e.to_string())?,
            DataSource::Cifar10 => {
                let dir = self.dir.as_deref().ok_or("data.dir is required for cifar10")?;
                cifar::load_cifar10_binary(dir, self.limit).map_err(|e| e.to_string())?
            }
        };
        let split = raw.with_split(self.valid_fraction, self.split_seed).map_err(|e| e.to_string())?;
        Ok(split.standardized().0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub trials: usize,
    pub max_gen: usize,
    pub estimators: Vec<String>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            trials: 5,
            max_gen: 20,
            estimators: ["rwe", "neg_flops", "neg_params", "noise"].map(String::from).to_vec(),
        }
    }
}

/// Everything a command needs. Execution-only settings (`workers`, `out`)
/// are not written back, so configs saved by runs that differ only in those
/// are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. Overrides `search.seed`.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub workers: usize,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub space: SpaceChoice,
    pub compat_mode: bool,
    pub backend: Backend,
    /// `genome,accuracy` CSV for the table backend and ablations.
    pub table: Option<PathBuf>,
    pub search: SearchConfig,
    pub rwe: RweConfig,
    /// Defaults to the search-time scale of `space`.
    pub scale: Option<ScaleConfig>,
    pub data: DataConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            out: None,
            space: SpaceChoice::Micro,
            compat_mode: true,
            backend: Backend::Rwe,
            table: None,
            search: SearchConfig::default(),
            rwe: RweConfig::default(),
            scale: None,
            data: DataConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string().trim_start_matches('.').to_owned(),
            message: e.inner().message().to_owned(),
        })?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    /// Fills defaults that depend on other keys and propagates the root seed.
    pub fn resolve(&mut self) {
        self.search.seed = self.seed;
        if self.scale.is_none() {
            self.scale = Some(match self.space {
                SpaceChoice::Micro => ScaleConfig::micro_search(),
                SpaceChoice::Macro => ScaleConfig::macro_search(),
            });
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.search.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, message: &str| Err(ConfigError::Invalid { key, message: message.to_owned() });
        if self.workers == 0 {
            return invalid("workers", "must be at least 1");
        }
        if self.search.pop_size < 2 {
            return invalid("search.pop_size", "must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.search.crossover_prob) {
            return invalid("search.crossover_prob", "must lie in [0, 1]");
        }
        if self.search.mutation_prob.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return invalid("search.mutation_prob", "must lie in [0, 1]");
        }
        if self.search.mutation_eta.is_nan() || self.search.mutation_eta < 0.0 {
            return invalid("search.mutation_eta", "must be non-negative");
        }
        if self.rwe.folds == 0 {
            return invalid("rwe.folds", "must be at least 1");
        }
        if self.rwe.epochs == 0 || self.rwe.batch_size == 0 || self.rwe.norm_batch == 0 {
            return invalid("rwe", "epochs, batch_size and norm_batch must be positive");
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            return invalid("data.valid_fraction", "must lie in [0, 1)");
        }
        if self.data.classes < 2 || self.data.classes > 256 {
            return invalid("data.classes", "must lie in [2, 256]");
        }
        if self.space == SpaceChoice::Macro && !self.compat_mode {
            return invalid("compat_mode", "only applies to the micro space");
        }
        if self.ablation.trials == 0 {
            return invalid("ablation.trials", "must be at least 1");
        }
        Ok(())
    }

    pub fn search_space(&self) -> SearchSpace {
        match self.space {
            SpaceChoice::Micro => SearchSpace::micro(self.compat_mode),
            SpaceChoice::Macro => SearchSpace::macro_space(),
        }
    }

    pub fn space_kind(&self) -> SpaceKind {
        self.search_space().kind()
    }

    pub fn scale(&self) -> ScaleConfig {
        self.scale.clone().unwrap_or_else(|| match self.space {
            SpaceChoice::Micro => ScaleConfig::micro_search(),
            SpaceChoice::Macro => ScaleConfig::macro_search(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}
