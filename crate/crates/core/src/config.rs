//! The run configuration: one TOML document with a section per module.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datasets::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::geometry::AnchorConfig;
use crate::inference::InferConfig;
use crate::mining::HimConfig;
use crate::net::NetConfig;
use crate::targets::{MatchConfig, OhemConfig};
use crate::trainer::TrainConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Name of the config echo written into every run directory.
pub const ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub anchors: AnchorConfig,
    pub net: NetConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub ohem: OhemConfig,
    pub him: HimConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// The full-scale reference settings.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            anchors: AnchorConfig::default(),
            net: NetConfig::default(),
            matching: MatchConfig::default(),
            ohem: OhemConfig::default(),
            him: HimConfig::default(),
            augment: AugmentConfig::paper(),
            train: TrainConfig::paper(),
            infer: InferConfig::paper(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// The same method scaled down to synthetic 256x256 images on one core.
    pub fn toy() -> Self {
        Self {
            augment: AugmentConfig::toy(),
            train: TrainConfig::toy(),
            infer: InferConfig::toy(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &'static str| move |e: Error| Error::Config(format!("[{section}] {e}"));
        self.anchors.validate().map_err(ctx("anchors"))?;
        self.net.validate().map_err(ctx("net"))?;
        self.matching.validate().map_err(ctx("match"))?;
        self.ohem.validate().map_err(ctx("ohem"))?;
        self.him.validate().map_err(ctx("him"))?;
        self.augment.validate().map_err(ctx("augment"))?;
        self.train.validate().map_err(ctx("train"))?;
        self.infer.validate().map_err(ctx("infer"))?;
        self.eval.validate().map_err(ctx("eval"))?;
        self.synth.validate().map_err(ctx("synth"))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective config, headed by the tool version, into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = format!("# facemine {VERSION}\n{}", self.to_toml()?);
        fs::write(dir.join(ECHO_FILE), text)?;
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}
