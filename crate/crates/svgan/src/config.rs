//! Single-document run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svgan_core::data::PhantomConfig;
use svgan_core::models::{DiscriminatorConfig, GeneratorConfig};
use svgan_core::trainer::TrainConfig;

use crate::error::{Error, Result};
use crate::fsutil::read_json;

pub const SEED_ENV: &str = "SVGAN_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub generator: GeneratorConfig,
    /// Derived from the generator when absent.
    pub discriminator: Option<DiscriminatorConfig>,
    pub train: TrainConfig,
    /// Fraction of patients held out for validation.
    pub val_fraction: f64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: None,
            train: TrainConfig::default(),
            val_fraction: 0.2,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn discriminator(&self) -> DiscriminatorConfig {
        self.discriminator
            .clone()
            .unwrap_or_else(|| DiscriminatorConfig::matching(&self.generator))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.generator.validate()?;
        self.discriminator().validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Validation(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        let (g, d) = (&self.generator, self.discriminator());
        if (d.in_channels, d.num_seg_classes, d.height, d.width)
            != (g.in_channels, g.num_seg_classes, g.height, g.width)
        {
            return Err(Error::Validation(
                "discriminator in_channels/num_seg_classes/height/width must match the generator".into(),
            ));
        }
        Ok(())
    }

    /// Generator dimensions must agree with the phantom settings when the
    /// dataset is synthesised from this config.
    pub fn validate_phantom_match(&self) -> Result<()> {
        let (g, p) = (&self.generator, &self.phantom);
        if (g.in_channels, g.num_seg_classes, g.num_diseases, g.height, g.width)
            != (p.num_modalities, p.num_seg_classes, p.num_diseases, p.height, p.width)
        {
            return Err(Error::Validation(
                "generator in_channels/num_seg_classes/num_diseases/height/width differ from the phantom settings"
                    .into(),
            ));
        }
        Ok(())
    }

    fn apply_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Validation(format!("{}={:?} is not an unsigned integer", SEED_ENV, s))),
        Err(_) => Ok(None),
    }
}

/// Reads, applies the seed override and validates before returning.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_json(path)?;
    if let Some(seed) = env_seed()? {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// FNV-1a of the canonical JSON serialisation.
pub fn config_hash(cfg: &RunConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serialises");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
