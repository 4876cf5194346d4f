//! Blind face video restoration with a discrete visual prior and
//! motion-statistics modulation for temporal coherence.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod codec;
pub mod degrade;
pub mod error;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod predictor;
pub mod toy;
pub mod training;

pub use checkpoint::Checkpoint;
pub use clip::{load_clip, VideoClip};
pub use codec::{Codec, CodecConfig};
pub use config::Config;
pub use degrade::{degrade_clip, sample_degradation_params, DegradationParams, DegradationRanges, Interval};
pub use error::{Error, Result};
pub use grid::{lookup, quantize, FeatureGrid, IndexGrid, VisionBank};
pub use manifest::RunManifest;
pub use metrics::{ifd, psnr, MetricReport};
pub use motion::{match_stats, modulate, MotionConfig, MotionStatsBank};
pub use predictor::{LogitsGrid, Predictor, PredictorConfig, PredictorMode};
pub use training::{RestorationModel, TrainConfig};
