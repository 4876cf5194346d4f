//! Stage-2 restoration training: losses, discriminator, the restoration
//! model (encoder copy, predictor, motion modulation, fusion, generator) and
//! the alternating generator/discriminator optimization.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adam, save_adam, Checkpoint};
use crate::clip::VideoClip;
use crate::codec::{gather_codes, perceptual_l1, quantize_tensor, Codec, CodecConfig, Encoder, Generator};
use crate::error::{Error, IoContext, Result};
use crate::grid::{FeatureGrid, IndexGrid};
use crate::motion::{modulate_with_bank, Fusion, MotionConfig, MotionStatsBank};
use crate::nn::{self, conv2d, conv3d, Adam, Conv2d, Conv3d, ParamStore};
use crate::perceptual::FeatureExtractor;
use crate::predictor::{argmax, cross_entropy, LogitsGrid, Predictor, PredictorConfig, TokenGeometry};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// Generator minimizes `log(1 − D(v̂))`.
    Minimax,
    /// Generator minimizes `−log D(v̂)`.
    Nonsaturating,
}

impl std::str::FromStr for GanLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimax" => Ok(Self::Minimax),
            "nonsaturating" => Ok(Self::Nonsaturating),
            other => Err(Error::Config(format!("unknown gan_loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Weight of the bank cross-entropy in the generator objective.
    pub bank_weight: f64,
    pub seed: u64,
    pub clip_frames: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub gan_loss: GanLoss,
    pub adv_weight: f64,
    pub grad_clip: f64,
    pub ckpt_every: usize,
    pub disc_channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            batch_size: 4,
            iterations: 2000,
            bank_weight: 0.5,
            seed: 0,
            clip_frames: 8,
            beta1: 0.9,
            beta2: 0.999,
            gan_loss: GanLoss::Minimax,
            adv_weight: 1.0,
            grad_clip: 1.0,
            ckpt_every: 500,
            disc_channels: vec![16, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.bank_weight >= 0.0) {
            return Err(Error::Config(format!("bank_weight must be nonnegative, got {}", self.bank_weight)));
        }
        if self.batch_size == 0 || self.clip_frames == 0 {
            return Err(Error::Config("batch_size and clip_frames must be at least 1".into()));
        }
        if self.disc_channels.is_empty() {
            return Err(Error::Config("disc_channels must not be empty".into()));
        }
        Ok(())
    }
}

/// One training step's scalar losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub consi: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub bank: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lr: f64,
    pub seed: u64,
}

/// `mean|a − b| + Σ_layers mean|φ(a) − φ(b)|` on `B×F×C×H×W` tensors.
pub fn consistency_tensor(restored: &Tensor, hq: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if restored.dims() != hq.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", restored.dims(), hq.dims())));
    }
    let l1 = (restored - hq)?.abs()?.mean_all()?;
    Ok((l1 + perceptual_l1(extractor, restored, hq)?)?)
}

pub fn consistency_loss(restored: &VideoClip, hq: &VideoClip, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if restored.dims() != hq.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", restored.dims(), hq.dims())));
    }
    let dev = Device::Cpu;
    let a = restored.to_tensor(&dev, DType::F64)?.unsqueeze(0)?;
    let b = hq.to_tensor(&dev, DType::F64)?.unsqueeze(0)?;
    nn::scalar(&consistency_tensor(&a, &b, extractor)?)
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Generator adversarial term averaged over the batch.
pub fn generator_adversarial(p_fake: &Tensor, kind: GanLoss) -> Result<Tensor> {
    let p = clamp_prob(p_fake)?;
    Ok(match kind {
        GanLoss::Minimax => p.affine(-1.0, 1.0)?.log()?.mean_all()?,
        GanLoss::Nonsaturating => p.log()?.neg()?.mean_all()?,
    })
}

/// `−[log D(real) + log(1 − D(fake))]` averaged over the batch.
pub fn discriminator_adversarial(p_real: &Tensor, p_fake: &Tensor) -> Result<Tensor> {
    let real = clamp_prob(p_real)?.log()?;
    let fake = clamp_prob(p_fake)?.affine(-1.0, 1.0)?.log()?;
    Ok((real + fake)?.mean_all()?.neg()?)
}

/// Scalar forms of the adversarial terms for given probabilities.
pub fn adversarial_terms(p_real: f64, p_fake: f64, kind: GanLoss) -> (f64, f64) {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let gen = match kind {
        GanLoss::Minimax => (1.0 - c(p_fake)).ln(),
        GanLoss::Nonsaturating => -c(p_fake).ln(),
    };
    (gen, -(c(p_real).ln() + (1.0 - c(p_fake)).ln()))
}

/// Mean token cross-entropy of `logits` against `gt` codes.
pub fn bank_prediction_loss(logits: &LogitsGrid, gt: &IndexGrid) -> Result<f64> {
    let (f, h, w, n) = logits.values.dim();
    if gt.dims() != (f, h, w) {
        return Err(Error::Shape(format!("logits {:?} vs codes {:?}", (f, h, w), gt.dims())));
    }
    if let Some(&c) = gt.codes.iter().find(|&&c| c >= n) {
        return Err(Error::CodeOutOfRange { code: c, size: n });
    }
    let dev = Device::Cpu;
    let l = logits.to_tensor(&dev, DType::F64)?.unsqueeze(0)?;
    let t = gt.to_tensor(&dev)?.flatten_all()?;
    nn::scalar(&cross_entropy(&l, &t)?)
}

/// Ground-truth codes of a high-quality clip under the frozen stage-1 codec.
pub fn derive_gt_codes(hq: &VideoClip, codec: &Codec) -> Result<IndexGrid> {
    Ok(codec.quantize(&codec.encode(hq)?)?.0)
}

/// Spatio-temporal patch classifier.
#[derive(Debug, Clone)]
pub struct Discriminator {
    downs: Vec<Conv2d>,
    temporal: Conv3d,
    out: Conv2d,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, in_channels: usize, channels: &[usize]) -> Result<Self> {
        let mut downs = Vec::new();
        let mut cin = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            downs.push(conv2d(ps, &format!("disc.down{i}"), cin, c, 4, 2, 1)?);
            cin = c;
        }
        Ok(Self {
            downs,
            temporal: conv3d(ps, "disc.temporal", cin, cin)?,
            out: conv2d(ps, "disc.out", cin, 1, 1, 1, 0)?,
        })
    }

    /// Patch logits `B×F×1×h×w`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = x.dims5()?;
        let mut y = x.reshape((b * f, c, h, w))?;
        for d in &self.downs {
            y = d.forward(&y)?.silu()?;
        }
        let (_, c, h, w) = y.dims4()?;
        let y = self.temporal.forward(&y.reshape((b, f, c, h, w))?)?.silu()?;
        let y = self.out.forward(&y.reshape((b * f, c, h, w))?)?;
        Ok(y.reshape((b, f, 1, h, w))?)
    }

    /// Probability of being real per clip: sigmoid of the mean patch logit.
    pub fn prob(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        Ok(candle_nn::ops::sigmoid(&self.logits(x)?.reshape((b, ()))?.mean(1)?)?)
    }
}

/// Everything needed to rebuild a restoration model from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub codec: CodecConfig,
    pub predictor: PredictorConfig,
    pub motion: MotionConfig,
    pub frame_height: usize,
    pub frame_width: usize,
    pub seed: u64,
}

impl ModelMeta {
    pub fn geometry(&self) -> TokenGeometry {
        TokenGeometry {
            frames: self.codec.clip_frames,
            height: self.frame_height / self.codec.downscale,
            width: self.frame_width / self.codec.downscale,
            channels: self.codec.latent_channels,
        }
    }
}

pub struct StageTwoOutput {
    pub logits: Tensor,
    pub codes: Vec<usize>,
    pub content: Tensor,
    pub fused: Tensor,
    /// Unclamped generator output.
    pub restored: Tensor,
}

/// Encoder copy `E`, predictor `C`, fusion and generator `G` over a frozen
/// vision bank and motion bank.
pub struct RestorationModel {
    pub meta: ModelMeta,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub fusion: Fusion,
    pub generator: Generator,
    pub bank: Tensor,
    pub motion_bank: Option<MotionStatsBank>,
}

impl RestorationModel {
    pub fn new(meta: ModelMeta, bank: Tensor, motion_bank: Option<MotionStatsBank>, dtype: DType, device: &Device) -> Result<Self> {
        meta.codec.validate()?;
        let s = meta.codec.downscale;
        if meta.frame_height % s != 0 || meta.frame_width % s != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} not divisible by downscale {s}",
                meta.frame_height, meta.frame_width
            )));
        }
        let geo = meta.geometry();
        if let Some(mb) = &motion_bank {
            if mb.frames != geo.frames {
                return Err(Error::Shape(format!("motion bank built for {} frames, model uses {}", mb.frames, geo.frames)));
            }
        }
        let mut store = ParamStore::new(meta.seed, dtype, device);
        let encoder = Encoder::new(&mut store, &meta.codec)?;
        let generator = Generator::new(&mut store, &meta.codec)?;
        let predictor = Predictor::new(&mut store, meta.predictor.clone(), geo, meta.codec.bank_size_vision)?;
        let fusion = Fusion::new(
            &mut store,
            geo.channels,
            geo.frames * geo.height * geo.width,
            meta.motion.fusion_blocks,
            meta.motion.fusion_heads,
        )?;
        let bank = bank.detach().to_dtype(dtype)?.to_device(device)?;
        Ok(Self { meta, store, encoder, predictor, fusion, generator, bank, motion_bank })
    }

    /// Starts from the stage-1 encoder, generator and bank.
    pub fn from_codec(
        codec: &Codec,
        predictor: PredictorConfig,
        motion: MotionConfig,
        frame_size: (usize, usize),
        motion_bank: Option<MotionStatsBank>,
        seed: u64,
    ) -> Result<Self> {
        let meta = ModelMeta {
            codec: codec.config.clone(),
            predictor,
            motion,
            frame_height: frame_size.0,
            frame_width: frame_size.1,
            seed,
        };
        let model = Self::new(meta, codec.bank.clone(), motion_bank, codec.dtype(), codec.device())?;
        model.store.copy_prefix_from(&codec.store, "encoder.")?;
        model.store.copy_prefix_from(&codec.store, "generator.")?;
        Ok(model)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Argmax codes of `B×F×h×w×N` logits and their bank rows.
    pub fn content(&self, logits: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let (b, f, h, w, n) = logits.dims5()?;
        let flat = logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let codes: Vec<usize> = flat.chunks(n).map(|c| argmax(c.iter().copied())).collect();
        let content = gather_codes(&self.bank, &codes, (b, f, h, w))?;
        Ok((codes, content))
    }

    /// `z″` for each clip of a `B×F×L×h×w` content tensor.
    pub fn modulated(&self, content: &Tensor) -> Result<Tensor> {
        let bank = self
            .motion_bank
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact("motion bank (run build-motion-bank)".into()))?;
        let s = self.meta.codec.downscale;
        let mut out = Vec::new();
        for i in 0..content.dim(0)? {
            let grid = FeatureGrid::from_tensor(&content.get(i)?, s)?;
            let m = modulate_with_bank(&grid, bank, self.meta.motion.modulation_variant, self.meta.motion.epsilon)?;
            out.push(m.to_tensor(self.device(), self.dtype())?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    /// Full forward pass on a `B×F×C×H×W` low-quality batch.
    pub fn forward(&self, lq: &Tensor, use_motion: bool) -> Result<StageTwoOutput> {
        let z = self.encoder.forward(lq)?;
        let logits = self.predictor.forward(&z)?;
        let (codes, content) = self.content(&logits)?;
        let fused = if use_motion {
            self.fusion.forward(&content, &self.modulated(&content)?)?
        } else {
            content.clone()
        };
        let restored = self.generator.forward(&fused)?;
        Ok(StageTwoOutput { logits, codes, content, fused, restored })
    }

    /// Restores one clip of exactly `clip_frames` frames.
    pub fn restore_window(&self, clip: &VideoClip, use_motion: bool) -> Result<VideoClip> {
        let (f, c, h, w) = clip.dims();
        let m = &self.meta;
        if (f, c, h, w) != (m.codec.clip_frames, m.codec.in_channels, m.frame_height, m.frame_width) {
            return Err(Error::Shape(format!(
                "window {f}×{c}×{h}×{w}, model expects {}×{}×{}×{}",
                m.codec.clip_frames, m.codec.in_channels, m.frame_height, m.frame_width
            )));
        }
        let x = clip.to_tensor(self.device(), self.dtype())?.unsqueeze(0)?;
        let out = self.forward(&x, use_motion)?;
        VideoClip::from_tensor(&out.restored.squeeze(0)?)
    }

    pub fn motion_enabled(&self) -> bool {
        self.meta.motion.enabled
    }

    pub fn to_checkpoint(&self, step: u64, digest: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(step, digest, serde_json::to_string(&self.meta)?);
        ckpt.extend_prefixed("model.", &self.store.snapshot()?)?;
        ckpt.insert("bank", &self.bank)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, motion_bank: Option<MotionStatsBank>, dtype: DType, device: &Device) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ckpt.metadata)?;
        let model = Self::new(meta, ckpt.get("bank")?.clone(), motion_bank, dtype, device)?;
        model.store.load(&ckpt.with_prefix("model."))?;
        Ok(model)
    }
}

/// Alternating generator/discriminator optimization.
pub struct Stage2Trainer {
    pub config: TrainConfig,
    pub model: RestorationModel,
    pub disc_store: ParamStore,
    pub disc: Discriminator,
    frozen: Codec,
    extractor: Box<dyn FeatureExtractor>,
    gen_opt: Adam,
    disc_opt: Adam,
    groups: Vec<Vec<Var>>,
    pub step: usize,
    pub last_checkpoint: Option<PathBuf>,
}

impl Stage2Trainer {
    pub fn new(config: TrainConfig, model: RestorationModel, frozen: Codec, extractor: Box<dyn FeatureExtractor>) -> Result<Self> {
        config.validate()?;
        let mut disc_store = ParamStore::new(config.seed ^ 0xd15c, model.dtype(), model.device());
        let disc = Discriminator::new(&mut disc_store, model.meta.codec.in_channels, &config.disc_channels)?;
        let prediction: Vec<Var> = [model.store.vars_with_prefix("encoder."), model.store.vars_with_prefix("predictor.")].concat();
        let synthesis: Vec<Var> = [model.store.vars_with_prefix("fusion."), model.store.vars_with_prefix("generator.")].concat();
        let mut gen_opt = Adam::new([prediction.clone(), synthesis.clone()].concat(), config.lr)?;
        let mut disc_opt = Adam::new(disc_store.vars(), config.lr)?;
        for o in [&mut gen_opt, &mut disc_opt] {
            o.beta1 = config.beta1;
            o.beta2 = config.beta2;
        }
        Ok(Self {
            config,
            model,
            disc_store,
            disc,
            frozen,
            extractor,
            gen_opt,
            disc_opt,
            groups: vec![prediction, synthesis],
            step: 0,
            last_checkpoint: None,
        })
    }

    pub fn frozen_codec(&self) -> &Codec {
        &self.frozen
    }

    /// Flattened ground-truth codes of a high-quality batch.
    pub fn gt_codes(&self, hq: &Tensor) -> Result<Tensor> {
        let z = self.frozen.encoder.forward(hq)?.detach();
        let (codes, _) = quantize_tensor(&z, &self.frozen.bank)?;
        let codes: Vec<u32> = codes.into_iter().map(|c| c as u32).collect();
        let n = codes.len();
        Ok(Tensor::from_vec(codes, n, self.model.device())?)
    }

    /// Generator objective and its parts: `(total, consi, adv_g, bank, output)`.
    pub fn generator_objective(&self, lq: &Tensor, hq: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor, StageTwoOutput)> {
        let gt = self.gt_codes(hq)?;
        let out = self.model.forward(lq, self.model.motion_enabled())?;
        let consi = consistency_tensor(&out.restored, hq, self.extractor.as_ref())?;
        let bank = cross_entropy(&out.logits, &gt)?;
        let adv = generator_adversarial(&self.disc.prob(&out.restored)?, self.config.gan_loss)?;
        let total = ((&consi + (&adv * self.config.adv_weight)?)? + (&bank * self.config.bank_weight)?)?;
        Ok((total, consi, adv, bank, out))
    }

    pub fn train_step(&mut self, lq: &Tensor, hq: &Tensor) -> Result<LossRecord> {
        let (total_g, consi, adv_g, bank, out) = self.generator_objective(lq, hq)?;
        let values = [nn::scalar(&total_g)?, nn::scalar(&consi)?, nn::scalar(&adv_g)?, nn::scalar(&bank)?];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.non_finite(format!("generator losses {values:?}")));
        }
        let mut grads = total_g.backward()?;
        for g in &self.groups {
            nn::clip_grad_norm(&mut grads, g, self.config.grad_clip)?;
        }
        self.gen_opt.step(&grads)?;

        let fake = out.restored.detach();
        let total_d = discriminator_adversarial(&self.disc.prob(hq)?, &self.disc.prob(&fake)?)?;
        let adv_d = nn::scalar(&total_d)?;
        if !adv_d.is_finite() {
            return Err(self.non_finite(format!("discriminator loss {adv_d}")));
        }
        let mut grads = total_d.backward()?;
        nn::clip_grad_norm(&mut grads, self.disc_opt.vars(), self.config.grad_clip)?;
        self.disc_opt.step(&grads)?;

        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            consi: values[1],
            adv_g: values[2],
            adv_d,
            bank: values[3],
            total_g: values[0],
            total_d: adv_d,
            lr: self.config.lr,
            seed: self.config.seed,
        })
    }

    fn non_finite(&self, what: String) -> Error {
        let last = self
            .last_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none written yet".into());
        Error::NonFinite(format!("{what} at step {}; last good checkpoint: {last}", self.step + 1))
    }

    pub fn to_checkpoint(&self, digest: &str) -> Result<Checkpoint> {
        let mut ckpt = self.model.to_checkpoint(self.step as u64, digest)?;
        ckpt.extend_prefixed("disc.", &self.disc_store.snapshot()?)?;
        save_adam(&mut ckpt, "opt.gen.", &self.gen_opt)?;
        save_adam(&mut ckpt, "opt.disc.", &self.disc_opt)?;
        Ok(ckpt)
    }

    pub fn save_checkpoint(&mut self, path: &Path, digest: &str) -> Result<()> {
        self.to_checkpoint(digest)?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Restores weights, discriminator and optimizer state from `ckpt`.
    pub fn resume_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.model.store.load(&ckpt.with_prefix("model."))?;
        self.disc_store.load(&ckpt.with_prefix("disc."))?;
        load_adam(ckpt, "opt.gen.", &mut self.gen_opt)?;
        load_adam(ckpt, "opt.disc.", &mut self.disc_opt)?;
        self.step = ckpt.step_count as usize;
        Ok(())
    }
}

/// Encoder copy and predictor trained on the bank cross-entropy alone.
pub struct PredictorTrainer {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub predictor: Predictor,
    opt: Adam,
    pub step: usize,
}

impl PredictorTrainer {
    pub fn from_codec(codec: &Codec, config: PredictorConfig, geometry: TokenGeometry, lr: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed, codec.dtype(), codec.device());
        let encoder = Encoder::new(&mut store, &codec.config)?;
        store.copy_prefix_from(&codec.store, "encoder.")?;
        let predictor = Predictor::new(&mut store, config, geometry, codec.config.bank_size_vision)?;
        let opt = Adam::new(store.vars(), lr)?;
        Ok(Self { store, encoder, predictor, opt, step: 0 })
    }

    pub fn loss(&self, lq: &Tensor, gt: &Tensor) -> Result<Tensor> {
        cross_entropy(&self.predictor.forward(&self.encoder.forward(lq)?)?, gt)
    }

    pub fn train_step(&mut self, lq: &Tensor, gt: &Tensor, clip: f64) -> Result<f64> {
        let loss = self.loss(lq, gt)?;
        let v = nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("bank loss at step {}", self.step + 1)));
        }
        let mut grads = loss.backward()?;
        nn::clip_grad_norm(&mut grads, self.opt.vars(), clip)?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(v)
    }
}

/// Appends loss records as JSON lines.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).at(d)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self { file: std::io::BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n").at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}

/// Per-token agreement of predicted and ground-truth codes.
pub fn code_agreement(predicted: &[usize], gt: &[usize]) -> f64 {
    let same = predicted.iter().zip(gt).filter(|(a, b)| a == b).count();
    same as f64 / gt.len().max(1) as f64
}

/// Splits flattened `b,f,y,x` codes into per-clip index grids.
pub fn codes_to_grids(codes: &[usize], dims: (usize, usize, usize, usize), downscale: usize) -> Result<Vec<IndexGrid>> {
    let (b, f, h, w) = dims;
    let all = ndarray::Array4::from_shape_vec((b, f, h, w), codes.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(all
        .axis_iter(Axis(0))
        .map(|c| IndexGrid { codes: Array3::from(c.to_owned()), downscale })
        .collect())
}
