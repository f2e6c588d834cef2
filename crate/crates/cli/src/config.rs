//! Run configuration: profile defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hflow_core::flow::DEFAULT_STYLE_WIDTHS;
use hflow_core::training::data::ImagePool;
use hflow_core::training::{Pools, Profile};
use hflow_core::{Backend, ImageSize, ModelConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

/// Environment variable naming the run directory.
pub const ENV_RUN_DIR: &str = "HFLOW_RUN_DIR";
/// Environment variable naming a pretrained VGG-19 weight file.
pub const ENV_VGG_WEIGHTS: &str = "HFLOW_VGG_WEIGHTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub backend: Backend,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Preset name, or a free label when `expansions` is given.
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansions: Option<Vec<usize>>,
    pub style_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
    /// Images per synthetic pool, used when no directories are given.
    pub synthetic_count: usize,
    pub synthetic_size: usize,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        RunConfig {
            profile,
            model: ModelSection {
                variant: Variant::Hf.name().to_string(),
                expansions: None,
                style_widths: DEFAULT_STYLE_WIDTHS.to_vec(),
            },
            train: TrainConfig::profile(profile),
            backend: Backend::SeededStandin { seed: 0 },
            data: DataSection {
                source_dir: None,
                target_dir: None,
                synthetic_count: 20,
                synthetic_size: 64,
            },
        }
    }

    /// Builds the configuration for `profile` (or the file's own `profile`
    /// key when the flag is absent) with the file's values layered on top.
    pub fn load(file: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        let Some(path) = file else {
            return Ok(Self::defaults(profile.unwrap_or(Profile::Desk)));
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, profile).with_context(|| format!("config {}", path.display()))
    }

    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut overlay: toml::Table = toml::from_str(text)?;
        let file_profile = match overlay.remove("profile") {
            Some(v) => Some(v.try_into::<Profile>()?),
            None => None,
        };
        let profile = profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut base = toml::Table::try_from(Self::defaults(profile))?;
        merge(&mut base, overlay);
        let cfg: RunConfig = toml::Value::Table(base).try_into()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let expansions = match &m.expansions {
            Some(e) => e.clone(),
            None => m.variant.parse::<Variant>()?.expansions().to_vec(),
        };
        let name = match &m.expansions {
            Some(_) => m.variant.clone(),
            None => m.variant.parse::<Variant>()?.name().to_string(),
        };
        Ok(ModelConfig::from_expansions(&name, 3, &expansions, &m.style_widths)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        match (&self.data.source_dir, &self.data.target_dir) {
            (Some(_), Some(_)) => {}
            (None, None) if self.profile == Profile::Desk => {
                if self.data.synthetic_count == 0 || self.data.synthetic_size == 0 {
                    bail!("synthetic_count and synthetic_size must be positive");
                }
            }
            (None, None) => bail!("the {:?} profile needs data.source_dir and data.target_dir", self.profile),
            _ => bail!("data.source_dir and data.target_dir must be given together"),
        }
        Ok(())
    }

    /// Loads the image pools, or builds seeded synthetic ones.
    pub fn pools(&self) -> Result<Pools> {
        match (&self.data.source_dir, &self.data.target_dir) {
            (Some(s), Some(t)) => Ok(Pools {
                source: ImagePool::load_dir(s)?,
                target: ImagePool::load_dir(t)?,
            }),
            _ => {
                let size = ImageSize::square(self.data.synthetic_size);
                let n = self.data.synthetic_count;
                let seed = self.train.seed;
                Ok(Pools {
                    source: ImagePool::synthetic_source(n, size, seed),
                    target: ImagePool::synthetic_target(n, size, seed.wrapping_add(1)),
                })
            }
        }
    }
}

/// Recursive table merge; `backend` is replaced whole because its fields
/// depend on its `kind`.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "backend" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Backend for commands that need a feature extractor: the weight file from
/// the flag or environment if any, else the seeded stand-in.
pub fn backend_from(weights: Option<PathBuf>, fallback: Backend) -> Backend {
    match weights {
        Some(path) => Backend::PretrainedVgg19 { path },
        None => fallback,
    }
}

/// ASCII label for default run directories.
pub fn slug(name: &str) -> String {
    name.replace('†', "-dagger")
        .replace('+', "p")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}
