//! Versioned TOML run configuration. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecTrainConfig;
use crate::degrade::{DegradeConfig, DCT_BLOCK, SCALE_FACTOR};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::seam::EncoderOptions;
use crate::synth::SynthConfig;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable consulted when neither a flag nor the config sets a seed.
pub const SEED_ENV: &str = "LATENT_VSR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub degrade: DegradeConfig,
    #[serde(default)]
    pub codec: CodecTrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub sample: SampleSettings,
    #[serde(default)]
    pub ablate: AblateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            degrade: DegradeConfig::default(),
            codec: CodecTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainSettings::default(),
            sample: SampleSettings::default(),
            ablate: AblateSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub id: String,
    /// Pooling cell size on the low-quality frames.
    pub patch: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            id: "stub".into(),
            patch: 2,
            width: 16,
        }
    }
}

impl EncoderConfig {
    pub fn options(&self) -> EncoderOptions {
        EncoderOptions {
            patch: self.patch,
            width: self.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: usize,
    pub stage1_learning_rate: f64,
    pub stage2_learning_rate: f64,
    /// Side of the square high-quality crops.
    pub crop: usize,
    /// Frames per training segment in stage 2 (stage 1 always uses 1).
    pub segment_length: usize,
    /// Number of fixed training segments drawn from the data.
    pub examples: usize,
    /// Number of random frame crops used to pre-train the codec.
    pub codec_crops: usize,
    pub clip_norm: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 3,
            steps: 2000,
            stage1_learning_rate: 1e-4,
            stage2_learning_rate: 5e-5,
            crop: 32,
            segment_length: 4,
            examples: 48,
            codec_crops: 256,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSettings {
    pub steps: usize,
    pub segment_length: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            segment_length: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSettings {
    /// Procedural videos used for training and evaluation.
    pub synth: SynthConfig,
    pub held_out_videos: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub profile_row: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                videos: 4,
                frames: 4,
                height: 32,
                width: 32,
                ..SynthConfig::default()
            },
            held_out_videos: 1,
            stage1_steps: 200,
            stage2_steps: 50,
            profile_row: 16,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.degrade.validate()?;
        self.denoiser.validate()?;
        if self.encoder.width != self.denoiser.semantic_width {
            return Err(Error::Config(format!(
                "encoder.width {} differs from denoiser.semantic_width {}",
                self.encoder.width, self.denoiser.semantic_width
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.examples == 0 || t.segment_length == 0 || t.codec_crops == 0 {
            return Err(Error::Config(
                "train.batch_size, examples, segment_length and codec_crops must be positive".into(),
            ));
        }
        if !(t.stage1_learning_rate > 0.0 && t.stage2_learning_rate > 0.0 && t.clip_norm > 0.0) {
            return Err(Error::Config("learning rates and clip_norm must be positive".into()));
        }
        let mut unit = lcm(
            crate::codec::CODEC_FACTOR * self.denoiser.spatial_divisor(),
            SCALE_FACTOR * self.encoder.patch,
        );
        if self.degrade.quantize {
            unit = lcm(unit, SCALE_FACTOR * DCT_BLOCK);
        }
        if t.crop == 0 || t.crop % unit != 0 {
            return Err(Error::Config(format!("train.crop {} must be a multiple of {unit}", t.crop)));
        }
        if t.segment_length > self.denoiser.max_frames || self.sample.segment_length > self.denoiser.max_frames {
            return Err(Error::Config(format!(
                "segment lengths must not exceed denoiser.max_frames {}",
                self.denoiser.max_frames
            )));
        }
        if self.sample.steps == 0 || self.sample.segment_length == 0 {
            return Err(Error::Config("sample.steps and segment_length must be positive".into()));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Flag, then config, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
