//! Run configuration: one JSON document with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::degrade::DegradationRanges;
use crate::error::{Error, IoContext, Result};
use crate::motion::MotionConfig;
use crate::perceptual::{ExtractorKind, PyramidConfig};
use crate::predictor::PredictorConfig;
use crate::toy::ToyConfig;
use crate::training::TrainConfig;

/// Environment variable consulted for the seed when neither the config file
/// nor the command line sets one.
pub const SEED_ENV: &str = "DPTC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub ranges: DegradationRanges,
    /// Draw fresh parameters for every frame instead of once per clip.
    pub per_frame: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { ranges: DegradationRanges::full(0), per_frame: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub extractor: ExtractorKind,
    pub pyramid: PyramidConfig,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { extractor: ExtractorKind::RandomPyramid, pyramid: PyramidConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Global seed; when set it overrides every per-section seed.
    pub seed: Option<u64>,
    pub codec: CodecConfig,
    pub predictor: PredictorConfig,
    pub motion: MotionConfig,
    pub train: TrainConfig,
    pub degradation: DegradationConfig,
    pub perceptual: PerceptualConfig,
    pub toy: ToyConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            codec: CodecConfig::default(),
            predictor: PredictorConfig::default(),
            motion: MotionConfig::default(),
            train: TrainConfig::default(),
            degradation: DegradationConfig::default(),
            perceptual: PerceptualConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl Config {
    /// Small widths and banks sized for the bundled 10-clip synthetic set on
    /// one CPU core.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.codec = CodecConfig {
            latent_channels: 32,
            downscale: 8,
            encoder_channels: vec![16, 32, 32],
            generator_channels: vec![32, 32, 16],
            res_blocks: 1,
            frame_attention_heads: 4,
            bank_size_vision: 256,
            clip_frames: 8,
            dead_code_steps: 200,
            lr: 1e-3,
            batch_size: 2,
            iterations: 2000,
            ..CodecConfig::default()
        };
        c.predictor = PredictorConfig { predictor_blocks: 2, d_model: 64, heads: 4, ..PredictorConfig::default() };
        c.motion = MotionConfig { bank_size_motion: 64, ..MotionConfig::default() };
        c.train = TrainConfig {
            lr: 2e-4,
            batch_size: 1,
            iterations: 2000,
            ckpt_every: 500,
            disc_channels: vec![8, 16],
            ..TrainConfig::default()
        };
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    /// Applies the global seed (explicit, else `DPTC_SEED`) to every section.
    pub fn resolve_seed(&mut self, explicit: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?),
            Err(_) => None,
        };
        if let Some(seed) = explicit.or(self.seed).or(env) {
            self.seed = Some(seed);
            self.codec.seed = seed;
            self.train.seed = seed;
            self.toy.seed = seed;
            self.degradation.ranges.seed = seed;
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.train.validate()?;
        self.degradation.ranges.validate()?;
        if self.train.clip_frames != self.codec.clip_frames {
            return Err(Error::Config(format!(
                "train.clip_frames {} differs from codec.clip_frames {}",
                self.train.clip_frames, self.codec.clip_frames
            )));
        }
        if !(self.motion.epsilon > 0.0) || self.motion.bank_size_motion == 0 {
            return Err(Error::Config("motion.epsilon and motion.bank_size_motion must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
