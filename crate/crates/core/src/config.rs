//! Run configuration: every tunable of both stages, training and generation,
//! as one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptSpec;
use crate::dmae::DmaeConfig;
use crate::error::{Error, Result};
use crate::tcld::TcldConfig;
use crate::train::{from_toml, to_toml, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub steps_gen: usize,
    pub steps_dec: usize,
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            steps_gen: 100,
            steps_dec: 100,
            cfg_scale: crate::tcld::DEFAULT_CFG_SCALE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: String,
    pub prompt: PromptSpec,
    pub generate: GenerateConfig,
    pub stage1: DmaeConfig,
    pub stage2: TcldConfig,
    pub train1: TrainConfig,
    pub train2: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (stage1, stage2, train1, train2) = match preset {
            Preset::Full => (
                DmaeConfig::full(),
                TcldConfig::full(),
                TrainConfig::stage1_full(),
                TrainConfig::stage2_full(),
            ),
            Preset::Tiny => (
                DmaeConfig::tiny(),
                TcldConfig::tiny(),
                TrainConfig::tiny(),
                TrainConfig::tiny(),
            ),
        };
        Self {
            output_dir: "runs".into(),
            prompt: PromptSpec::default(),
            generate: GenerateConfig::default(),
            stage1,
            stage2,
            train1,
            train2,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        from_toml(text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(&e))))
    }

    /// Checks every section and cross-section constraint, reporting all failures at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{section}: {}", strip(&e)));
            }
        };
        check("prompt", self.prompt.validate());
        check("stage1", self.stage1.validate());
        check("stage2", self.stage2.validate());
        check("train1", self.train1.validate());
        check("train2", self.train2.validate());
        if self.generate.steps_gen == 0 || self.generate.steps_dec == 0 {
            problems.push("generate: step counts must be positive".into());
        }
        if !(self.generate.cfg_scale >= 0.0) {
            problems.push("generate: cfg_scale must be >= 0".into());
        }
        if self.stage2.latent_channels() != self.stage1.latent_channels {
            problems.push(format!(
                "stage2.generator.in_channels {} != stage1.latent_channels {}",
                self.stage2.latent_channels(),
                self.stage1.latent_channels
            ));
        }
        if let Err(e) = self.stage1.latent_length(self.train1.crop_length) {
            problems.push(format!("train1.crop_length: {}", strip(&e)));
        }
        if let Ok(spl) = self.stage1.samples_per_latent() {
            if self.train2.crop_length != self.stage2.latent_length * spl {
                problems.push(format!(
                    "train2.crop_length {} must equal stage2.latent_length {} x {spl} samples per latent",
                    self.train2.crop_length, self.stage2.latent_length
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
