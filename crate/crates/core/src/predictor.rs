//! Transformer that classifies degraded tokens into vision-bank indices.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::grid::{self, FeatureGrid, IndexGrid, VisionBank};
use crate::nn::{
    attention, feed_forward, layer_norm, linear, Attention, FeedForward, Init, LayerNorm, Linear,
    ParamStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// All tokens of the clip attend to each other.
    SpatialTemporal,
    /// Tokens attend only within their own frame.
    SpatialOnly,
}

impl std::str::FromStr for PredictorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_temporal" => Ok(Self::SpatialTemporal),
            "spatial_only" => Ok(Self::SpatialOnly),
            other => Err(Error::Config(format!("unknown predictor mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub predictor_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub mode: PredictorMode,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            predictor_blocks: 6,
            d_model: 256,
            heads: 8,
            ffn_mult: 4,
            mode: PredictorMode::SpatialTemporal,
        }
    }
}

/// Token geometry the position tables are sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// `f×h×w×N` pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    pub values: Array4<f32>,
}

impl LogitsGrid {
    pub fn classes(&self) -> usize {
        self.values.dim().3
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (f, h, w, n) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let values = Array4::from_shape_vec((f, h, w, n), data).map_err(|e| Error::Shape(e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { values })
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.values.iter().copied().collect();
        Ok(Tensor::from_vec(data, self.values.dim(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    fn forward(&self, x: &Tensor, want: bool) -> Result<(Tensor, Option<Tensor>)> {
        let h = self.norm1.forward(x)?;
        let (a, w) = self.attn.forward(&h, &h, want)?;
        let x = (x + a)?;
        let x = (&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?;
        Ok((x, w))
    }
}

/// Index-prediction transformer `C`.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub geometry: TokenGeometry,
    pub classes: usize,
    input: Linear,
    temporal_pos: Tensor,
    spatial_pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Predictor {
    /// Registers parameters under `predictor.` in `ps`.
    pub fn new(ps: &mut ParamStore, config: PredictorConfig, geometry: TokenGeometry, classes: usize) -> Result<Self> {
        let d = config.d_model;
        if config.predictor_blocks == 0 {
            return Err(Error::Config("predictor_blocks must be at least 1".into()));
        }
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d_model {d}", config.heads)));
        }
        let TokenGeometry { frames, height, width, channels } = geometry;
        let input = linear(ps, "predictor.input", channels, d)?;
        let temporal_pos = ps.param("predictor.pos.temporal", &[frames, d], Init::Normal(0.02))?;
        let spatial_pos = ps.param("predictor.pos.spatial", &[height * width, d], Init::Normal(0.02))?;
        let blocks = (0..config.predictor_blocks)
            .map(|i| {
                let n = format!("predictor.block{i}");
                Ok(Block {
                    norm1: layer_norm(ps, &format!("{n}.norm1"), d)?,
                    attn: attention(ps, &format!("{n}.attn"), d, config.heads, false)?,
                    norm2: layer_norm(ps, &format!("{n}.norm2"), d)?,
                    ffn: feed_forward(ps, &format!("{n}.ffn"), d, d * config.ffn_mult, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(ps, "predictor.norm", d)?;
        let head = linear(ps, "predictor.head", d, classes)?;
        Ok(Self { config, geometry, classes, input, temporal_pos, spatial_pos, blocks, norm, head })
    }

    fn check(&self, f: usize, c: usize, h: usize, w: usize) -> Result<()> {
        let g = self.geometry;
        if (f, c, h, w) != (g.frames, g.channels, g.height, g.width) {
            return Err(Error::Shape(format!(
                "token grid {f}×{c}×{h}×{w} does not match predictor geometry {}×{}×{}×{}",
                g.frames, g.channels, g.height, g.width
            )));
        }
        Ok(())
    }

    /// `(f·h·w)×d` position table, frame-major.
    pub fn position_table(&self) -> Result<Tensor> {
        let d = self.config.d_model;
        let hw = self.geometry.height * self.geometry.width;
        let t = self.temporal_pos.unsqueeze(1)?.broadcast_add(&self.spatial_pos.unsqueeze(0)?)?;
        Ok(t.reshape((self.geometry.frames * hw, d))?)
    }

    /// `B×F×L×h×w` tokens to `B×F×h×w×N` logits. With `want_attention`, also
    /// returns the last block's head-averaged `B×T×T` attention (`T = f·h·w`),
    /// with exact zeros across frames in spatial-only mode.
    pub fn forward_with_mode(
        &self,
        z: &Tensor,
        mode: PredictorMode,
        want_attention: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (b, f, c, h, w) = z.dims5()?;
        self.check(f, c, h, w)?;
        let (hw, t, d) = (h * w, f * h * w, self.config.d_model);
        let tokens = z.permute((0, 1, 3, 4, 2))?.reshape((b, t, c))?;
        let mut x = self.input.forward(&tokens)?.broadcast_add(&self.position_table()?)?;
        if mode == PredictorMode::SpatialOnly {
            x = x.reshape((b * f, hw, d))?;
        }
        let last = self.blocks.len() - 1;
        let mut attn = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, a) = blk.forward(&x, want_attention && i == last)?;
            x = y;
            if let Some(a) = a {
                attn = Some(a.mean(1)?);
            }
        }
        let x = x.reshape((b, t, d))?;
        let logits = self.head.forward(&self.norm.forward(&x)?)?.reshape((b, f, h, w, self.classes))?;
        let attn = match (attn, mode) {
            (Some(a), PredictorMode::SpatialOnly) => Some(expand_block_diagonal(&a, b, f, hw)?),
            (a, _) => a,
        };
        Ok((logits, attn))
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_mode(z, self.config.mode, false)?.0)
    }
}

/// `(B·f)×hw×hw` per-frame maps to `B×T×T` with zeros off the diagonal blocks.
fn expand_block_diagonal(a: &Tensor, b: usize, f: usize, hw: usize) -> Result<Tensor> {
    let a = a.reshape((b, f, hw, hw))?;
    let mut rows = Vec::with_capacity(f);
    for i in 0..f {
        let blk = a.narrow(1, i, 1)?.squeeze(1)?;
        let mut parts = Vec::with_capacity(f);
        for j in 0..f {
            parts.push(if i == j { blk.clone() } else { blk.zeros_like()? });
        }
        rows.push(Tensor::cat(&parts, 2)?);
    }
    Ok(Tensor::cat(&rows, 1)?)
}

pub fn predict_logits(z: &FeatureGrid, predictor: &Predictor, mode: PredictorMode) -> Result<LogitsGrid> {
    let dev = predictor.temporal_pos.device();
    let x = z.to_tensor(dev, predictor.temporal_pos.dtype())?.unsqueeze(0)?;
    let (logits, _) = predictor.forward_with_mode(&x, mode, false)?;
    LogitsGrid::from_tensor(&logits.squeeze(0)?)
}

/// Per-token argmax; ties go to the lowest index.
pub fn predict_indices(logits: &LogitsGrid, downscale: usize) -> IndexGrid {
    let (f, h, w, _) = logits.values.dim();
    let codes = Array3::from_shape_fn((f, h, w), |(i, j, k)| {
        argmax(logits.values.slice(ndarray::s![i, j, k, ..]).iter().copied())
    });
    IndexGrid { codes, downscale }
}

pub fn argmax(values: impl IntoIterator<Item = f32>) -> usize {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Predicted content `z′`, its codes and the raw logits.
pub fn predict_content(
    z: &FeatureGrid,
    predictor: &Predictor,
    bank: &VisionBank,
) -> Result<(FeatureGrid, IndexGrid, LogitsGrid)> {
    if bank.size() != predictor.classes {
        return Err(Error::Shape(format!(
            "bank has {} entries, classifier has {}",
            bank.size(),
            predictor.classes
        )));
    }
    let logits = predict_logits(z, predictor, predictor.config.mode)?;
    let codes = predict_indices(&logits, z.downscale);
    let content = grid::lookup(bank, &codes)?;
    Ok((content, codes, logits))
}

/// Tensor form of the bank cross-entropy: `B×F×h×w×N` logits and `B·F·h·w`
/// target codes.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), n))?;
    let logp = crate::nn::log_softmax(&flat)?;
    let picked = logp.gather(&targets.reshape(((), 1))?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Last-block attention of the token at `query = (f, y, x)` as one `h×w` map
/// per frame.
pub fn export_attention_maps(
    z: &FeatureGrid,
    predictor: &Predictor,
    mode: PredictorMode,
    query: (usize, usize, usize),
) -> Result<Vec<Array2<f32>>> {
    let (f, _, h, w) = z.dims();
    let (qf, qy, qx) = query;
    if qf >= f || qy >= h || qx >= w {
        return Err(Error::InvalidPosition(format!("({qf}, {qy}, {qx}) outside {f}×{h}×{w}")));
    }
    let dev = predictor.temporal_pos.device();
    let x = z.to_tensor(dev, predictor.temporal_pos.dtype())?.unsqueeze(0)?;
    let (_, attn) = predictor.forward_with_mode(&x, mode, true)?;
    let attn = attn.expect("attention requested");
    let row = (qf * h + qy) * w + qx;
    let row: Vec<f32> = attn.get(0)?.get(row)?.to_dtype(DType::F32)?.to_vec1()?;
    Ok(row
        .chunks(h * w)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk has h·w values"))
        .collect())
}

/// Writes `dir/frame<k>.png` (normalized by the map maximum) and
/// `dir/weights.csv` with columns `frame, y, x, weight`.
pub fn save_attention_maps(dir: &Path, maps: &[Array2<f32>]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let peak = maps.iter().flat_map(|m| m.iter()).fold(0f32, |a, &b| a.max(b)).max(f32::MIN_POSITIVE);
    let path = dir.join("weights.csv");
    let mut csv = csv::Writer::from_path(&path)?;
    csv.write_record(["frame", "y", "x", "weight"])?;
    for (k, m) in maps.iter().enumerate() {
        let (h, w) = m.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([crate::clip::to_u8(m[[y as usize, x as usize]] / peak)])
        });
        let p = dir.join(format!("frame{k}.png"));
        img.save(&p)?;
        for ((y, x), v) in m.indexed_iter() {
            csv.write_record([k.to_string(), y.to_string(), x.to_string(), format!("{v:e}")])?;
        }
    }
    csv.flush().at(&path)?;
    Ok(())
}

/// `attn/<clip_id>/<f>_<h>_<w>` under `root`.
pub fn attention_dir(root: &Path, clip_id: &str, query: (usize, usize, usize)) -> std::path::PathBuf {
    root.join("attn").join(clip_id).join(format!("{}_{}_{}", query.0, query.1, query.2))
}
