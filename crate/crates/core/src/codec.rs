//! Vector-quantized video autoencoder: a per-frame strided-convolution
//! encoder, the vision bank, and a generator built from 3-D residual blocks,
//! frame attention and transposed convolutions.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adam, save_adam, Checkpoint};
use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::grid::{self, FeatureGrid, IndexGrid, VisionBank};
use crate::nn::{
    self, attention, conv2d, conv3d, deconv2d, layer_norm, Adam, Attention, Conv2d, Conv3d,
    Deconv2d, Init, LayerNorm, ParamStore,
};
use crate::perceptual::FeatureExtractor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    Gradient,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub downscale: usize,
    /// Output width of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Generator width at each resolution, coarsest first.
    pub generator_channels: Vec<usize>,
    pub res_blocks: usize,
    pub frame_attention_heads: usize,
    pub bank_size_vision: usize,
    pub clip_frames: usize,
    pub commitment_beta: f64,
    pub codebook_update: CodebookUpdate,
    pub ema_decay: f64,
    /// Entries unused for this many steps are reset to random encoder outputs.
    pub dead_code_steps: usize,
    pub perceptual_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            latent_channels: 64,
            downscale: 8,
            encoder_channels: vec![32, 64, 64],
            generator_channels: vec![64, 64, 32],
            res_blocks: 1,
            frame_attention_heads: 4,
            bank_size_vision: 1024,
            clip_frames: 8,
            commitment_beta: 0.25,
            codebook_update: CodebookUpdate::Gradient,
            ema_decay: 0.99,
            dead_code_steps: 2000,
            perceptual_weight: 1.0,
            lr: 2e-4,
            batch_size: 4,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn stages(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.downscale.is_power_of_two() || self.downscale < 2 {
            return bad(format!("downscale {} must be a power of two ≥ 2", self.downscale));
        }
        if self.encoder_channels.len() != self.stages() || self.generator_channels.len() != self.stages() {
            return bad(format!(
                "downscale {} needs {} encoder and generator widths",
                self.downscale,
                self.stages()
            ));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad("in_channels must be 1 or 3".into());
        }
        if self.bank_size_vision < 2 {
            return bad("bank_size_vision must be at least 2".into());
        }
        if self.generator_channels[0] % self.frame_attention_heads.max(1) != 0 {
            return bad("frame_attention_heads must divide the coarsest generator width".into());
        }
        if self.latent_channels == 0 || self.clip_frames == 0 || self.batch_size == 0 {
            return bad("latent_channels, clip_frames and batch_size must be positive".into());
        }
        Ok(())
    }
}

fn frames_to_batch(x: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (b, f, c, h, w) = x.dims5()?;
    Ok((x.reshape((b * f, c, h, w))?, b, f))
}

/// Residual 2-D block `x + conv(silu(conv(silu(x))))`.
#[derive(Debug, Clone)]
struct ResBlock2d {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock2d {
    fn new(ps: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            c1: conv2d(ps, &format!("{name}.c1"), ch, ch, 3, 1, 1)?,
            c2: conv2d(ps, &format!("{name}.c2"), ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&x.silu()?)?;
        let h = self.c2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

/// Per-frame encoder `E`.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<Conv2d>,
    res: ResBlock2d,
    out: Conv2d,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &CodecConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            stages.push(conv2d(ps, &format!("encoder.down{i}"), cin, c, 4, 2, 1)?);
            cin = c;
        }
        Ok(Self {
            stages,
            res: ResBlock2d::new(ps, "encoder.res", cin)?,
            out: conv2d(ps, "encoder.out", cin, cfg.latent_channels, 1, 1, 0)?,
        })
    }

    /// `B×F×C×H×W` frames to `B×F×L×h×w` tokens.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut h, b, f) = frames_to_batch(x)?;
        for s in &self.stages {
            h = s.forward(&h)?.silu()?;
        }
        h = self.res.forward(&h)?;
        let z = self.out.forward(&h.silu()?)?;
        let (_, l, zh, zw) = z.dims4()?;
        Ok(z.reshape((b, f, l, zh, zw))?)
    }
}

/// `x + conv3d(silu(conv3d(silu(x))))` over `B×F×C×h×w`.
#[derive(Debug, Clone)]
pub struct ResBlock3d {
    pub c1: Conv3d,
    pub c2: Conv3d,
}

impl ResBlock3d {
    fn new(ps: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            c1: conv3d(ps, &format!("{name}.c1"), ch, ch)?,
            c2: conv3d(ps, &format!("{name}.c2"), ch, ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&x.silu()?)?;
        let h = self.c2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

/// Attention along the frame axis at each spatial location, with a residual.
#[derive(Debug, Clone)]
pub struct FrameAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl FrameAttention {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: layer_norm(ps, &format!("{name}.norm"), ch)?,
            attn: attention(ps, &format!("{name}.attn"), ch, heads, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = x.dims5()?;
        let seq = x.permute((0, 3, 4, 1, 2))?.reshape((b * h * w, f, c))?;
        let normed = self.norm.forward(&seq)?;
        let (y, _) = self.attn.forward(&normed, &normed, false)?;
        let y = (seq + y)?.reshape((b, h, w, f, c))?.permute((0, 3, 4, 1, 2))?;
        Ok(y.contiguous()?)
    }
}

/// Generator `G`: tokens back to frames.
#[derive(Debug, Clone)]
pub struct Generator {
    input: Conv2d,
    pub res: Vec<ResBlock3d>,
    pub frame_attention: FrameAttention,
    ups: Vec<Deconv2d>,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, cfg: &CodecConfig) -> Result<Self> {
        let g = &cfg.generator_channels;
        let input = conv2d(ps, "generator.in", cfg.latent_channels, g[0], 3, 1, 1)?;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock3d::new(ps, &format!("generator.res{i}"), g[0]))
            .collect::<Result<Vec<_>>>()?;
        let frame_attention =
            FrameAttention::new(ps, "generator.frame_attn", g[0], cfg.frame_attention_heads)?;
        let mut ups = Vec::new();
        for i in 0..g.len() {
            let cout = if i + 1 < g.len() { g[i + 1] } else { cfg.in_channels };
            ups.push(deconv2d(ps, &format!("generator.up{i}"), g[i], cout)?);
        }
        Ok(Self { input, res, frame_attention, ups })
    }

    /// `B×F×L×h×w` tokens to unclamped `B×F×C×H×W` frames.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (flat, b, f) = frames_to_batch(z)?;
        let h = self.input.forward(&flat)?;
        let (_, c, hh, ww) = h.dims4()?;
        let mut h = h.reshape((b, f, c, hh, ww))?;
        for r in &self.res {
            h = r.forward(&h)?;
        }
        h = self.frame_attention.forward(&h)?;
        let (mut x, _, _) = frames_to_batch(&h)?;
        let last = self.ups.len() - 1;
        for (i, up) in self.ups.iter().enumerate() {
            x = up.forward(&x.silu()?)?;
            if i == last {
                break;
            }
        }
        let (_, c, hh, ww) = x.dims4()?;
        Ok(x.reshape((b, f, c, hh, ww))?)
    }

    /// Zeroes every frame-attention parameter and the off-center temporal taps
    /// of the 3-D convolutions, making each output frame a function of its own
    /// feature frame only.
    pub fn isolate_frames(&self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.named() {
            if name.starts_with("generator.frame_attn.attn") {
                var.set(&var.zeros_like()?)?;
            }
        }
        for r in &self.res {
            for conv in [&r.c1, &r.c2] {
                let w = &conv.w;
                let center = w.narrow(2, 1, 1)?;
                let zeros = center.zeros_like()?;
                let masked = Tensor::cat(&[&zeros, &center, &zeros], 2)?;
                let var = ps
                    .named()
                    .values()
                    .find(|v| v.as_tensor().id() == w.id())
                    .ok_or_else(|| Error::Config("conv weight not in store".into()))?;
                var.set(&masked)?;
            }
        }
        Ok(())
    }
}

/// Token tensor `B×F×L×h×w` → nearest-entry codes (row-major over `b,f,y,x`)
/// and the gathered `B×F×L×h×w` bank rows.
pub fn quantize_tensor(z: &Tensor, bank: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let (b, f, l, h, w) = z.dims5()?;
    let tokens = z
        .detach()
        .permute((0, 1, 3, 4, 2))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let bank_arr = VisionBank::from_tensor(&bank.detach())?;
    if bank_arr.dim() != l {
        return Err(Error::Shape(format!("bank width {} vs {l} latent channels", bank_arr.dim())));
    }
    let codes = grid::nearest_codes(&bank_arr, &tokens);
    let e = gather_codes(bank, &codes, (b, f, h, w))?;
    Ok((codes, e))
}

/// Bank rows for `codes` arranged as `B×F×L×h×w`.
pub fn gather_codes(bank: &Tensor, codes: &[usize], dims: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (b, f, h, w) = dims;
    let l = bank.dim(1)?;
    let idx: Vec<u32> = codes.iter().map(|&c| c as u32).collect();
    let idx = Tensor::from_vec(idx, codes.len(), bank.device())?;
    let e = bank.index_select(&idx, 0)?.reshape((b, f, h, w, l))?.permute((0, 1, 4, 2, 3))?;
    Ok(e.contiguous()?)
}

/// Straight-through estimator: forward value of `e`, gradient routed to `z`.
pub fn straight_through(z: &Tensor, e: &Tensor) -> Result<Tensor> {
    Ok((z + (e - z)?.detach())?)
}

/// `β·mean((z − sg(e))²)`.
pub fn commitment_loss(z: &Tensor, e: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(((z - e.detach())?.sqr()?.mean_all()? * beta)?)
}

/// `mean((sg(z) − e)²)`.
pub fn codebook_loss(z: &Tensor, e: &Tensor) -> Result<Tensor> {
    Ok((z.detach() - e)?.sqr()?.mean_all()?)
}

/// Encoder, vision bank and generator with their parameters.
pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub generator: Generator,
    pub bank: Tensor,
}

impl Codec {
    pub fn new(config: CodecConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype, device);
        let encoder = Encoder::new(&mut store, &config)?;
        let generator = Generator::new(&mut store, &config)?;
        let bank = store.param(
            "bank",
            &[config.bank_size_vision, config.latent_channels],
            Init::Uniform(1.0 / config.bank_size_vision as f64),
        )?;
        Ok(Self { config, store, encoder, generator, bank })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn bank_var(&self) -> &Var {
        self.store.get("bank").expect("bank parameter")
    }

    pub fn vision_bank(&self) -> Result<VisionBank> {
        VisionBank::from_tensor(&self.bank)
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let (_, c, h, w) = clip.dims();
        let s = self.config.downscale;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("clip has {c} channels, codec expects {}", self.config.in_channels)));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} not divisible by downscale {s}")));
        }
        Ok(())
    }

    /// Token grid `z` of a clip.
    pub fn encode(&self, clip: &VideoClip) -> Result<FeatureGrid> {
        self.check_clip(clip)?;
        let x = clip.to_tensor(self.device(), self.dtype())?.unsqueeze(0)?;
        let z = self.encoder.forward(&x)?.squeeze(0)?;
        FeatureGrid::from_tensor(&z, self.config.downscale)
    }

    /// Clip decoded from a token grid, clamped into `[0, 1]`.
    pub fn decode(&self, features: &FeatureGrid) -> Result<VideoClip> {
        let (_, c, _, _) = features.dims();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!("{c} feature channels, codec expects {}", self.config.latent_channels)));
        }
        let z = features.to_tensor(self.device(), self.dtype())?.unsqueeze(0)?;
        let x = self.generator.forward(&z)?.squeeze(0)?;
        VideoClip::from_tensor(&x)
    }

    pub fn quantize(&self, z: &FeatureGrid) -> Result<(IndexGrid, FeatureGrid)> {
        grid::quantize(z, &self.vision_bank()?)
    }

    pub fn to_checkpoint(&self, step: u64, digest: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(step, digest, serde_json::to_string(&self.config)?);
        ckpt.extend_prefixed("codec.", &self.store.snapshot()?)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let config: CodecConfig = serde_json::from_str(&ckpt.metadata)?;
        let codec = Self::new(config, dtype, device)?;
        codec.store.load(&ckpt.with_prefix("codec."))?;
        Ok(codec)
    }

    /// `decode(lookup(quantize(encode(clip))))`.
    pub fn reconstruct(&self, clip: &VideoClip) -> Result<VideoClip> {
        let (_, q) = self.quantize(&self.encode(clip)?)?;
        self.decode(&q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLossRecord {
    pub step: usize,
    pub recon_l1: f64,
    pub perceptual: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Stage-1 trainer: reconstruction of high-quality clips through the bank.
pub struct CodecTrainer {
    pub codec: Codec,
    pub opt: Adam,
    extractor: Box<dyn FeatureExtractor>,
    pub step: usize,
    last_used: Vec<usize>,
    ema_counts: Vec<f64>,
    ema_sums: Array2<f64>,
    initialized: bool,
    rng: ChaCha8Rng,
}

impl CodecTrainer {
    pub fn new(codec: Codec, extractor: Box<dyn FeatureExtractor>) -> Result<Self> {
        let vars = match codec.config.codebook_update {
            CodebookUpdate::Gradient => codec.store.vars(),
            CodebookUpdate::Ema => codec
                .store
                .named()
                .iter()
                .filter(|(k, _)| k.as_str() != "bank")
                .map(|(_, v)| v.clone())
                .collect(),
        };
        let opt = Adam::new(vars, codec.config.lr)?;
        let n = codec.config.bank_size_vision;
        let l = codec.config.latent_channels;
        let rng = ChaCha8Rng::seed_from_u64(codec.config.seed ^ 0x9e37_79b9);
        Ok(Self {
            codec,
            opt,
            extractor,
            step: 0,
            last_used: vec![0; n],
            ema_counts: vec![1.0; n],
            ema_sums: Array2::zeros((n, l)),
            initialized: false,
            rng,
        })
    }

    pub fn to_checkpoint(&self, digest: &str) -> Result<Checkpoint> {
        let mut ckpt = self.codec.to_checkpoint(self.step as u64, digest)?;
        save_adam(&mut ckpt, "opt.codec.", &self.opt)?;
        let dev = &Device::Cpu;
        let used: Vec<u32> = self.last_used.iter().map(|&u| u as u32).collect();
        ckpt.insert("trainer.last_used", &Tensor::new(used, dev)?)?;
        ckpt.insert("trainer.ema_counts", &Tensor::new(self.ema_counts.clone(), dev)?)?;
        let sums: Vec<f64> = self.ema_sums.iter().copied().collect();
        ckpt.insert("trainer.ema_sums", &Tensor::from_vec(sums, self.ema_sums.dim(), dev)?)?;
        Ok(ckpt)
    }

    /// Restores weights, optimizer and bank-maintenance state.
    pub fn resume_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.codec.store.load(&ckpt.with_prefix("codec."))?;
        load_adam(ckpt, "opt.codec.", &mut self.opt)?;
        self.step = ckpt.step_count as usize;
        self.last_used = ckpt.get("trainer.last_used")?.to_vec1::<u32>()?.into_iter().map(|u| u as usize).collect();
        self.ema_counts = ckpt.get("trainer.ema_counts")?.to_vec1::<f64>()?;
        let sums = ckpt.get("trainer.ema_sums")?;
        let (n, l) = sums.dims2()?;
        self.ema_sums = Array2::from_shape_vec((n, l), sums.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.initialized = true;
        Ok(())
    }

    fn tokens_of(z: &Tensor) -> Result<Array2<f32>> {
        let (b, f, l, h, w) = z.dims5()?;
        let flat = z
            .detach()
            .permute((0, 1, 3, 4, 2))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Array2::from_shape_vec((b * f * h * w, l), flat).map_err(|e| Error::Shape(e.to_string()))
    }

    fn set_bank_rows(&mut self, rows: &[(usize, Vec<f32>)]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut bank = self.codec.vision_bank()?.entries;
        for (i, r) in rows {
            for (c, v) in r.iter().enumerate() {
                bank[[*i, c]] = *v;
            }
        }
        let t = VisionBank { entries: bank }.to_tensor(self.codec.device(), self.codec.dtype())?;
        self.codec.bank_var().set(&t)?;
        Ok(())
    }

    /// Seeds every bank row from randomly chosen encoder outputs.
    fn init_bank(&mut self, tokens: &Array2<f32>) -> Result<()> {
        let n = self.codec.config.bank_size_vision;
        let rows: Vec<(usize, Vec<f32>)> = (0..n)
            .map(|i| {
                let j = self.rng.random_range(0..tokens.nrows());
                let jitter = if n > tokens.nrows() { 1e-3 } else { 0.0 };
                let row = tokens
                    .row(j)
                    .iter()
                    .map(|v| v + jitter * self.rng.random_range(-1.0f32..1.0))
                    .collect();
                (i, row)
            })
            .collect();
        self.set_bank_rows(&rows)?;
        for (i, r) in rows.iter() {
            for (c, v) in r.iter().enumerate() {
                self.ema_sums[[*i, c]] = *v as f64;
            }
        }
        self.initialized = true;
        Ok(())
    }

    fn reseed_dead_codes(&mut self, tokens: &Array2<f32>) -> Result<usize> {
        let limit = self.codec.config.dead_code_steps;
        if limit == 0 {
            return Ok(0);
        }
        let dead: Vec<usize> = (0..self.last_used.len())
            .filter(|&i| self.step - self.last_used[i] >= limit)
            .collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let picks = sample(&mut self.rng, tokens.nrows(), dead.len().min(tokens.nrows())).into_vec();
        let rows: Vec<(usize, Vec<f32>)> = dead
            .iter()
            .zip(picks.iter().cycle())
            .map(|(&i, &j)| (i, tokens.row(j).to_vec()))
            .collect();
        for (i, r) in &rows {
            self.last_used[*i] = self.step;
            self.ema_counts[*i] = 1.0;
            for (c, v) in r.iter().enumerate() {
                self.ema_sums[[*i, c]] = *v as f64;
            }
        }
        self.set_bank_rows(&rows)?;
        Ok(rows.len())
    }

    fn ema_update(&mut self, tokens: &Array2<f32>, codes: &[usize]) -> Result<()> {
        let decay = self.codec.config.ema_decay;
        let (n, l) = self.ema_sums.dim();
        let mut counts = vec![0f64; n];
        let mut sums = Array2::<f64>::zeros((n, l));
        for (t, &c) in codes.iter().enumerate() {
            counts[c] += 1.0;
            for k in 0..l {
                sums[[c, k]] += tokens[[t, k]] as f64;
            }
        }
        let total: f64 = self.ema_counts.iter().sum();
        for i in 0..n {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * counts[i];
        }
        self.ema_sums = &self.ema_sums * decay + &(sums * (1.0 - decay));
        // Laplace smoothing keeps rarely used entries finite
        let eps = 1e-5;
        let rows: Vec<(usize, Vec<f32>)> = (0..n)
            .map(|i| {
                let smoothed = (self.ema_counts[i] + eps) / (total + n as f64 * eps) * total;
                (i, (0..l).map(|k| (self.ema_sums[[i, k]] / smoothed) as f32).collect())
            })
            .collect();
        self.set_bank_rows(&rows)
    }

    /// Loss terms for a `B×F×C×H×W` batch; returns the differentiable total.
    pub fn losses(&self, hq: &Tensor) -> Result<(Tensor, Vec<usize>, Tensor, CodecLossRecord)> {
        let cfg = &self.codec.config;
        let z = self.codec.encoder.forward(hq)?;
        let (codes, e) = quantize_tensor(&z, &self.codec.bank)?;
        let quantized = straight_through(&z, &e)?;
        let recon = self.codec.generator.forward(&quantized)?;
        let recon_l1 = (&recon - hq)?.abs()?.mean_all()?;
        let perceptual = perceptual_l1(self.extractor.as_ref(), &recon, hq)?;
        let codebook = codebook_loss(&z, &e)?;
        let commitment = commitment_loss(&z, &e, cfg.commitment_beta)?;
        let mut total = ((&recon_l1 + (&perceptual * cfg.perceptual_weight)?)? + &commitment)?;
        if cfg.codebook_update == CodebookUpdate::Gradient {
            total = (total + &codebook)?;
        }
        let rec = CodecLossRecord {
            step: self.step,
            recon_l1: nn::scalar(&recon_l1)?,
            perceptual: nn::scalar(&perceptual)?,
            codebook: nn::scalar(&codebook)?,
            commitment: nn::scalar(&commitment)?,
            total: nn::scalar(&total)?,
        };
        Ok((total, codes, z, rec))
    }

    /// One optimization step on a batch of high-quality clips.
    pub fn train_step(&mut self, hq: &Tensor) -> Result<CodecLossRecord> {
        if !self.initialized {
            let z = self.codec.encoder.forward(hq)?;
            self.init_bank(&Self::tokens_of(&z)?)?;
        }
        let (total, codes, z, mut rec) = self.losses(hq)?;
        if !rec.total.is_finite() {
            return Err(Error::NonFinite(format!("codec loss at step {}: {rec:?}", self.step)));
        }
        let mut grads = total.backward()?;
        nn::clip_grad_norm(&mut grads, self.opt.vars(), 1.0)?;
        self.opt.step(&grads)?;
        self.step += 1;
        rec.step = self.step;
        for &c in &codes {
            self.last_used[c] = self.step;
        }
        let tokens = Self::tokens_of(&z)?;
        if self.codec.config.codebook_update == CodebookUpdate::Ema {
            self.ema_update(&tokens, &codes)?;
        }
        self.reseed_dead_codes(&tokens)?;
        Ok(rec)
    }
}

/// `Σ_layers mean|φ(a) − φ(b)|` over `B×F×C×H×W` clips.
pub fn perceptual_l1(extractor: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (fa, _, _) = frames_to_batch(a)?;
    let (fb, _, _) = frames_to_batch(b)?;
    let pa = extractor.features(&fa)?;
    let pb = extractor.features(&fb.detach())?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for (x, y) in pa.iter().zip(&pb) {
        total = (total + (x - y)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}
