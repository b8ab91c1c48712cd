//! Experiment configuration: one TOML file per run.
//!
//! A file only needs the keys it changes; everything else comes from the
//! defaults of the chosen scale. The effective configuration is written
//! next to every result.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::phantom::PhantomConfig;
use crate::reconstruct::{StraightenConfig, SurfaceSource};
use crate::train::TrainConfig;
use crate::types::FULL_VOLUME_BSCANS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Divides every channel count of the full architecture.
    pub width_divisor: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { width_divisor: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Accuracy-maximizing threshold on the test scores.
    #[default]
    BestOnTest,
    /// Threshold fixed from the reference instances' own scores.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PadSection {
    pub accuracy_threshold: AccuracyMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceChoice {
    #[default]
    Mask,
    IntensityPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    pub anchor_row: usize,
    pub window: usize,
    pub surface: SurfaceChoice,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        let s = StraightenConfig::default();
        Self {
            anchor_row: s.anchor_row,
            window: s.window,
            surface: SurfaceChoice::Mask,
        }
    }
}

impl ReconstructSection {
    pub fn straighten(&self) -> StraightenConfig {
        StraightenConfig {
            anchor_row: self.anchor_row,
            window: self.window,
            source: match self.surface {
                SurfaceChoice::Mask => SurfaceSource::Mask,
                SurfaceChoice::IntensityPeak => SurfaceSource::IntensityPeak,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed of the whole run; overrides the phantom and train seeds.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub dataset: DatasetSpec,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub pad: PadSection,
    pub reconstruct: ReconstructSection,
}

impl ExperimentConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let mut c = Self {
            seed: 0,
            phantom: PhantomConfig {
                n_bscans: 32,
                ..PhantomConfig::default()
            },
            dataset: DatasetSpec::default(),
            network: NetworkSection::default(),
            train: TrainConfig::default(),
            pad: PadSection::default(),
            reconstruct: ReconstructSection::default(),
        };
        if scale == Scale::Full {
            c.phantom.n_bscans = FULL_VOLUME_BSCANS;
            c.phantom.enforce_full_volume = true;
            c.dataset.annotated = 16;
            c.dataset.reference = 16;
            c.network.width_divisor = 1;
        }
        c
    }

    /// Parses TOML over the defaults of `scale`.
    pub fn from_toml(text: &str, scale: Scale) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::for_scale(scale)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, user);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, scale: Scale) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, scale).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Phantom parameters with the run seed.
    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    /// Training parameters with the run seed.
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig::with_width_divisor(self.network.width_divisor)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.net().validate()?;
        if self.reconstruct.window == 0 {
            return Err(Error::Config("reconstruct.window must be positive".into()));
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                let merged = merge(std::mem::take(b), u);
                *b = merged;
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
