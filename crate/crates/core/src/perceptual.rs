//! Frozen feature extractors used by the perceptual terms of the losses and
//! by the perceptual distance metric.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{conv2d, Conv2d, ParamStore};

/// Deterministic map from `N×C×H×W` frames to one or more feature blocks.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the frames themselves as the single feature block.
#[derive(Debug, Clone, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![frames.clone()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32], seed: 0x5eed_f00d }
    }
}

/// Stack of strided random convolutions frozen at a seeded initialization;
/// every block's activation is one feature level.
pub struct RandomConvPyramid {
    blocks: Vec<Conv2d>,
}

impl RandomConvPyramid {
    pub fn new(config: &PyramidConfig, in_channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(config.seed, dtype, device);
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            blocks.push(conv2d(&mut ps, &format!("pyramid.{i}"), cin, cout, 4, 2, 1)?);
            cin = cout;
        }
        // frozen: detach so no gradient ever reaches these weights
        for b in blocks.iter_mut() {
            b.w = b.w.detach();
            b.b = b.b.detach();
        }
        Ok(Self { blocks })
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn name(&self) -> &str {
        "random-conv-pyramid"
    }

    fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = frames.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    RandomPyramid,
}

pub fn build_extractor(
    kind: ExtractorKind,
    config: &PyramidConfig,
    in_channels: usize,
    dtype: DType,
    device: &Device,
) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match kind {
        ExtractorKind::Identity => Box::new(IdentityExtractor),
        ExtractorKind::RandomPyramid => {
            Box::new(RandomConvPyramid::new(config, in_channels, dtype, device)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_is_deterministic_and_multiscale() {
        let dev = Device::Cpu;
        let cfg = PyramidConfig::default();
        let a = RandomConvPyramid::new(&cfg, 3, DType::F32, &dev).unwrap();
        let b = RandomConvPyramid::new(&cfg, 3, DType::F32, &dev).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &dev).unwrap();
        let fa = a.features(&x).unwrap();
        let fb = b.features(&x).unwrap();
        assert_eq!(fa.len(), 3);
        assert_eq!(fa[0].dims(), &[2, 8, 16, 16]);
        assert_eq!(fa[2].dims(), &[2, 32, 4, 4]);
        for (p, q) in fa.iter().zip(&fb) {
            let d = (p - q).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }
}
