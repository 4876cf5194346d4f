//! Per-frame channel statistics, the motion statistics bank, statistics
//! modulation and cross-attention fusion.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::Tensor;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::grid::{nearest_entry, FeatureGrid};
use crate::nn::{attention, feed_forward, layer_norm, Attention, FeedForward, Init, LayerNorm, ParamStore};

pub const MOTION_BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationVariant {
    /// Divide by the source spread: output statistics become the target's.
    AdainCorrected,
    /// Divide by the target spread.
    AsPrinted,
}

impl std::str::FromStr for ModulationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adain_corrected" => Ok(Self::AdainCorrected),
            "as_printed" => Ok(Self::AsPrinted),
            other => Err(Error::Config(format!("unknown modulation variant {other:?}"))),
        }
    }
}

/// Which encoder features the motion bank is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    /// Bank rows substituted for the encoder tokens, matching the content
    /// the modulator sees at restoration time.
    Quantized,
    /// Raw encoder tokens.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub bank_size_motion: usize,
    pub modulation_variant: ModulationVariant,
    pub epsilon: f64,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub kmeans_iters: usize,
    pub motion_source: MotionSource,
    /// Disables modulation and fusion, decoding `z′` directly.
    pub enabled: bool,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            bank_size_motion: 16384,
            modulation_variant: ModulationVariant::AdainCorrected,
            epsilon: 1e-5,
            fusion_blocks: 2,
            fusion_heads: 4,
            kmeans_iters: 50,
            motion_source: MotionSource::Quantized,
            enabled: true,
        }
    }
}

/// Channel mean and population variance of every token.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub mu: Array3<f32>,
    pub sigma2: Array3<f32>,
}

impl FrameStats {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.mu.dim()
    }

    /// `Concat(μ[·,y,x], σ²[·,y,x])`.
    pub fn location_vector(&self, y: usize, x: usize) -> Vec<f32> {
        let mut v: Vec<f32> = self.mu.slice(ndarray::s![.., y, x]).to_vec();
        v.extend(self.sigma2.slice(ndarray::s![.., y, x]).iter());
        v
    }
}

pub fn frame_channel_stats(z: &FeatureGrid) -> FrameStats {
    let (f, c, h, w) = z.dims();
    let mut mu = Array3::zeros((f, h, w));
    let mut sigma2 = Array3::zeros((f, h, w));
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                let tok = z.values.slice(ndarray::s![t, .., y, x]);
                let m = tok.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let var = tok.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / c as f64;
                mu[[t, y, x]] = m as f32;
                sigma2[[t, y, x]] = var as f32;
            }
        }
    }
    FrameStats { mu, sigma2 }
}

/// `M×2f` bank of cross-frame (mean ‖ variance) vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionStatsBank {
    pub entries: Array2<f32>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionBankInfo {
    pub source_clip_count: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl MotionStatsBank {
    pub fn new(entries: Array2<f32>, frames: usize) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::EmptyBank);
        }
        if entries.ncols() != 2 * frames {
            return Err(Error::Shape(format!("entry width {} for {frames} frames", entries.ncols())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion bank entry".into()));
        }
        if entries.slice(ndarray::s![.., frames..]).iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative variance in motion bank".into()));
        }
        Ok(Self { entries, frames })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Binary blob plus the JSON sidecar next to it.
    pub fn save(&self, path: &Path, info: &MotionBankInfo) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp).at(&tmp)?);
            let mut put = || -> std::io::Result<()> {
                out.write_u32::<LittleEndian>(self.size() as u32)?;
                out.write_u32::<LittleEndian>(self.frames as u32)?;
                out.write_u32::<LittleEndian>(MOTION_BANK_FORMAT_VERSION)?;
                for &v in self.entries.iter() {
                    out.write_f32::<LittleEndian>(v)?;
                }
                out.flush()
            };
            put().at(&tmp)?;
        }
        std::fs::rename(&tmp, path).at(path)?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(info)?).at(&side)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, MotionBankInfo)> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut r = BufReader::new(File::open(path).at(path)?);
        let m = r.read_u32::<LittleEndian>().at(path)? as usize;
        let f = r.read_u32::<LittleEndian>().at(path)? as usize;
        let version = r.read_u32::<LittleEndian>().at(path)?;
        if version != MOTION_BANK_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut data = vec![0f32; m * 2 * f];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| bad(format!("truncated entries: {e}")))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).at(path)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let entries = Array2::from_shape_vec((m, 2 * f), data).map_err(|e| bad(e.to_string()))?;
        let side = Self::sidecar_path(path);
        let info = serde_json::from_slice(&std::fs::read(&side).at(&side)?)?;
        Ok((Self::new(entries, f)?, info))
    }
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters take the points
/// farthest from their current centroids. Returns the centroids.
pub fn kmeans(samples: &Array2<f32>, k: usize, iters: usize, seed: u64) -> Result<Array2<f32>> {
    let (n, d) = samples.dim();
    if k == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    if n < k {
        return Err(Error::InsufficientSamples { found: n, requested: k });
    }
    let samples = samples.as_standard_layout();
    let rows: Vec<&[f32]> = samples.outer_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f32>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&samples.row(first));
    let mut best: Vec<f64> = rows.iter().map(|r| sqdist(r, rows[first])).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // guards against landing on a zero-weight tail through rounding
            if best[idx] == 0.0 {
                idx = best.iter().position(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&samples.row(pick));
        let cr = centroids.row(c).to_vec();
        for (b, r) in best.iter_mut().zip(&rows) {
            *b = b.min(sqdist(r, &cr));
        }
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0f64; n];
    for _ in 0..iters {
        let flat = centroids.as_slice().expect("contiguous centroids").to_vec();
        for (i, r) in rows.iter().enumerate() {
            let (c, dd) = nearest_entry(&flat, d, r);
            assign[i] = c;
            dist[i] = dd;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (j, &v) in r.iter().enumerate() {
                sums[[assign[i], j]] += v as f64;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut far = order.into_iter();
        let mut changed = false;
        for c in 0..k {
            let new: Vec<f32> = if counts[c] == 0 {
                let p = far.next().unwrap_or(0);
                dist[p] = 0.0;
                rows[p].to_vec()
            } else {
                (0..d).map(|j| (sums[[c, j]] / counts[c] as f64) as f32).collect()
            };
            if centroids.row(c).iter().zip(&new).any(|(a, b)| a != b) {
                changed = true;
            }
            centroids.row_mut(c).assign(&ndarray::ArrayView1::from(&new));
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

/// Per-location statistics vectors of every grid, one row each.
pub fn motion_samples(grids: &[FeatureGrid]) -> Result<Array2<f32>> {
    let first = grids.first().ok_or(Error::InsufficientSamples { found: 0, requested: 1 })?;
    let f = first.frames();
    let mut rows = Vec::new();
    for g in grids {
        if g.frames() != f {
            return Err(Error::Shape(format!("grids with {} and {f} frames", g.frames())));
        }
        let s = frame_channel_stats(g);
        let (_, h, w) = s.dims();
        for y in 0..h {
            for x in 0..w {
                rows.extend(s.location_vector(y, x));
            }
        }
    }
    let n = rows.len() / (2 * f);
    Array2::from_shape_vec((n, 2 * f), rows).map_err(|e| Error::Shape(e.to_string()))
}

pub fn build_motion_bank(grids: &[FeatureGrid], m: usize, seed: u64, iters: usize) -> Result<MotionStatsBank> {
    let samples = motion_samples(grids)?;
    let f = samples.ncols() / 2;
    let mut centroids = kmeans(&samples, m, iters, seed)?;
    centroids.slice_mut(ndarray::s![.., f..]).mapv_inplace(|v| v.max(0.0));
    MotionStatsBank::new(centroids, f)
}

/// Nearest bank entry per spatial location, split back into `(μ′, σ′²)`.
pub fn match_stats(stats: &FrameStats, bank: &MotionStatsBank) -> Result<FrameStats> {
    let (f, h, w) = stats.dims();
    if bank.frames != f {
        return Err(Error::Shape(format!("motion bank built for {} frames, stats have {f}", bank.frames)));
    }
    let flat = bank.entries.as_slice().expect("contiguous bank");
    let mut mu = Array3::zeros((f, h, w));
    let mut sigma2 = Array3::zeros((f, h, w));
    for y in 0..h {
        for x in 0..w {
            let (idx, _) = nearest_entry(flat, 2 * f, &stats.location_vector(y, x));
            let e = bank.entries.row(idx);
            for t in 0..f {
                mu[[t, y, x]] = e[t];
                sigma2[[t, y, x]] = e[f + t];
            }
        }
    }
    Ok(FrameStats { mu, sigma2 })
}

pub fn modulate(
    z: &FeatureGrid,
    stats: &FrameStats,
    matched: &FrameStats,
    variant: ModulationVariant,
    eps: f64,
) -> Result<FeatureGrid> {
    let (f, _, h, w) = z.dims();
    if stats.dims() != (f, h, w) || matched.dims() != (f, h, w) {
        return Err(Error::Shape("statistics do not match the feature grid".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let finite = |a: &Array3<f32>| a.iter().all(|v| v.is_finite());
    if !(finite(&stats.mu) && finite(&stats.sigma2) && finite(&matched.mu) && finite(&matched.sigma2)) {
        return Err(Error::NonFinite("modulation statistics".into()));
    }
    let mut out = z.values.clone();
    for ((t, _, y, x), v) in out.indexed_iter_mut() {
        let m = stats.mu[[t, y, x]] as f64;
        let s = (stats.sigma2[[t, y, x]].max(0.0) as f64).sqrt();
        let mt = matched.mu[[t, y, x]] as f64;
        let st = (matched.sigma2[[t, y, x]].max(0.0) as f64).sqrt();
        let denom = match variant {
            ModulationVariant::AdainCorrected => s + eps,
            ModulationVariant::AsPrinted => st + eps,
        };
        *v = (st * (*v as f64 - m) / denom + mt) as f32;
    }
    FeatureGrid::new(out, z.downscale)
}

/// `z″` from `z′` via the motion bank.
pub fn modulate_with_bank(
    z: &FeatureGrid,
    bank: &MotionStatsBank,
    variant: ModulationVariant,
    eps: f64,
) -> Result<FeatureGrid> {
    let stats = frame_channel_stats(z);
    let matched = match_stats(&stats, bank)?;
    modulate(z, &stats, &matched, variant, eps)
}

#[derive(Debug, Clone)]
struct FusionBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Cross-attention blocks: queries from `z′`, keys and values from `z″`,
/// residual stream starting at `z′`. Output projections start at zero.
#[derive(Debug, Clone)]
pub struct Fusion {
    blocks: Vec<FusionBlock>,
    pos: Tensor,
}

impl Fusion {
    pub fn new(ps: &mut ParamStore, channels: usize, tokens: usize, blocks: usize, heads: usize) -> Result<Self> {
        let pos = ps.param("fusion.pos", &[tokens, channels], Init::Normal(0.02))?;
        let blocks = (0..blocks)
            .map(|i| {
                let n = format!("fusion.block{i}");
                Ok(FusionBlock {
                    norm_q: layer_norm(ps, &format!("{n}.norm_q"), channels)?,
                    norm_kv: layer_norm(ps, &format!("{n}.norm_kv"), channels)?,
                    attn: attention(ps, &format!("{n}.attn"), channels, heads, true)?,
                    norm_ffn: layer_norm(ps, &format!("{n}.norm_ffn"), channels)?,
                    ffn: feed_forward(ps, &format!("{n}.ffn"), channels, 2 * channels, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, pos })
    }

    /// `B×F×L×h×w` grids to the fused grid; with `want`, also the first
    /// block's `B×heads×T×T` attention.
    pub fn forward_with_weights(&self, predicted: &Tensor, modulated: &Tensor, want: bool) -> Result<(Tensor, Option<Tensor>)> {
        if predicted.dims() != modulated.dims() {
            return Err(Error::Shape(format!("fusion inputs {:?} vs {:?}", predicted.dims(), modulated.dims())));
        }
        let (b, f, c, h, w) = predicted.dims5()?;
        let t = f * h * w;
        if self.pos.dims() != [t, c] {
            return Err(Error::Shape(format!("fusion built for {:?} tokens, got {t}×{c}", self.pos.dims())));
        }
        let seq = |z: &Tensor| -> Result<Tensor> { Ok(z.permute((0, 1, 3, 4, 2))?.reshape((b, t, c))?) };
        let mut x = seq(predicted)?;
        let kv = seq(modulated)?.broadcast_add(&self.pos)?;
        let mut weights = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let q = blk.norm_q.forward(&x.broadcast_add(&self.pos)?)?;
            let (a, wt) = blk.attn.forward(&q, &blk.norm_kv.forward(&kv)?, want && i == 0)?;
            if wt.is_some() {
                weights = wt;
            }
            x = (x + a)?;
            x = (&x + blk.ffn.forward(&blk.norm_ffn.forward(&x)?)?)?;
        }
        let out = x.reshape((b, f, h, w, c))?.permute((0, 1, 4, 2, 3))?.contiguous()?;
        Ok((out, weights))
    }

    pub fn forward(&self, predicted: &Tensor, modulated: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(predicted, modulated, false)?.0)
    }
}

pub fn fuse(predicted: &FeatureGrid, modulated: &FeatureGrid, fusion: &Fusion) -> Result<FeatureGrid> {
    let (dev, dt) = (fusion.pos.device(), fusion.pos.dtype());
    let a = predicted.to_tensor(dev, dt)?.unsqueeze(0)?;
    let b = modulated.to_tensor(dev, dt)?.unsqueeze(0)?;
    FeatureGrid::from_tensor(&fusion.forward(&a, &b)?.squeeze(0)?, predicted.downscale)
}

/// Sum of squared distances from each sample to its nearest entry.
pub fn quantization_sse(samples: &Array2<f32>, entries: &Array2<f32>) -> f64 {
    let flat = entries.as_standard_layout().to_owned();
    let flat = flat.as_slice().expect("contiguous");
    samples
        .axis_iter(Axis(0))
        .map(|r| nearest_entry(flat, entries.ncols(), &r.to_vec()).1)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use ndarray::{array, Array4};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn grid_from(values: Array4<f32>) -> FeatureGrid {
        FeatureGrid::new(values, 8).unwrap()
    }

    fn random_grid(seed: u64, f: usize, c: usize, h: usize, w: usize) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        grid_from(Array4::from_shape_fn((f, c, h, w), |_| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn stats_of_simple_tokens() {
        let z = grid_from(Array4::from_shape_vec((1, 2, 1, 2), vec![2.0, 5.0, 4.0, 5.0]).unwrap());
        let s = frame_channel_stats(&z);
        assert_eq!(s.mu[[0, 0, 0]], 3.0);
        assert_eq!(s.sigma2[[0, 0, 0]], 1.0);
        assert_eq!(s.sigma2[[0, 0, 1]], 0.0);
    }

    #[test]
    fn stats_scale_with_the_input() {
        let z = random_grid(1, 2, 5, 3, 3);
        let s = frame_channel_stats(&z);
        let scaled = frame_channel_stats(&grid_from(z.values.mapv(|v| v * -3.0)));
        for (a, b) in s.mu.iter().zip(scaled.mu.iter()) {
            assert!((b - -3.0 * a).abs() < 1e-5);
        }
        for (a, b) in s.sigma2.iter().zip(scaled.sigma2.iter()) {
            assert!((b - 9.0 * a).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn match_examples() {
        let bank = MotionStatsBank::new(array![[0.0, 0.0], [1.0, 1.0]], 1).unwrap();
        let stats = FrameStats { mu: Array3::from_elem((1, 1, 1), 0.2), sigma2: Array3::from_elem((1, 1, 1), 0.1) };
        let m = match_stats(&stats, &bank).unwrap();
        assert_eq!((m.mu[[0, 0, 0]], m.sigma2[[0, 0, 0]]), (0.0, 0.0));
        let exact = FrameStats { mu: Array3::from_elem((1, 1, 1), 1.0), sigma2: Array3::from_elem((1, 1, 1), 1.0) };
        assert_eq!(match_stats(&exact, &bank).unwrap(), exact);
        let wrong = FrameStats { mu: Array3::zeros((2, 1, 1)), sigma2: Array3::zeros((2, 1, 1)) };
        assert!(matches!(match_stats(&wrong, &bank), Err(Error::Shape(_))));
        assert!(matches!(MotionStatsBank::new(Array2::zeros((0, 2)), 1), Err(Error::EmptyBank)));
    }

    #[test]
    fn modulation_scalar_example() {
        let z = grid_from(Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 3.0]).unwrap());
        let stats = frame_channel_stats(&z);
        let matched = FrameStats { mu: Array3::zeros((1, 1, 1)), sigma2: Array3::from_elem((1, 1, 1), 4.0) };
        let out = modulate(&z, &stats, &matched, ModulationVariant::AdainCorrected, 1e-5).unwrap();
        assert!((out.values[[0, 0, 0, 0]] + 2.0).abs() < 1e-4);
        assert!((out.values[[0, 1, 0, 0]] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn identity_and_degenerate_modulation() {
        let z = random_grid(2, 2, 6, 2, 2);
        let stats = frame_channel_stats(&z);
        let eps = 1e-5;
        for variant in [ModulationVariant::AdainCorrected, ModulationVariant::AsPrinted] {
            let out = modulate(&z, &stats, &stats, variant, eps).unwrap();
            for ((t, c, y, x), &v) in out.values.indexed_iter() {
                let dev = (z.values[[t, c, y, x]] - stats.mu[[t, y, x]]).abs() as f64;
                assert!(((v - z.values[[t, c, y, x]]).abs() as f64) <= eps * (1.0 + dev) + 1e-6);
            }
        }
        let flat = FrameStats { mu: Array3::from_elem((2, 2, 2), 0.7), sigma2: Array3::zeros((2, 2, 2)) };
        let out = modulate(&z, &stats, &flat, ModulationVariant::AdainCorrected, eps).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.7));
        assert!(matches!(modulate(&z, &stats, &flat, ModulationVariant::AdainCorrected, 0.0), Err(Error::Config(_))));
        let mut nan = flat.clone();
        nan.mu[[0, 0, 0]] = f32::NAN;
        assert!(matches!(modulate(&z, &stats, &nan, ModulationVariant::AdainCorrected, eps), Err(Error::NonFinite(_))));
    }

    #[test]
    fn modulation_is_frame_local() {
        let z = random_grid(3, 3, 4, 2, 2);
        let bank_stats = frame_channel_stats(&random_grid(4, 3, 4, 2, 2));
        let stats = frame_channel_stats(&z);
        let base = modulate(&z, &stats, &bank_stats, ModulationVariant::AdainCorrected, 1e-5).unwrap();
        let mut z2 = z.clone();
        z2.values.index_axis_mut(Axis(0), 1).mapv_inplace(|v| v * 2.0 - 1.0);
        let mut m2 = bank_stats.clone();
        m2.mu.index_axis_mut(Axis(0), 1).fill(3.0);
        let out = modulate(&z2, &frame_channel_stats(&z2), &m2, ModulationVariant::AdainCorrected, 1e-5).unwrap();
        for t in [0, 2] {
            assert_eq!(out.values.index_axis(Axis(0), t), base.values.index_axis(Axis(0), t));
        }
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let samples = array![[0.0f32, 1.0], [5.0, 5.0], [0.0, 1.0], [9.0, 2.0], [5.0, 5.0]];
        let c = kmeans(&samples, 3, 50, 0).unwrap();
        let mut rows: Vec<Vec<f32>> = c.outer_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![5.0, 5.0], vec![9.0, 2.0]]);
        let one = kmeans(&samples, 1, 50, 0).unwrap();
        let mean = samples.mean_axis(Axis(0)).unwrap();
        assert!(one.row(0).iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(kmeans(&samples, 6, 5, 0), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn bigger_banks_quantize_better() {
        let grids: Vec<_> = (0..6).map(|s| random_grid(10 + s, 2, 4, 4, 4)).collect();
        let samples = motion_samples(&grids).unwrap();
        let small = build_motion_bank(&grids, 8, 1, 50).unwrap();
        let large = build_motion_bank(&grids, 64, 1, 50).unwrap();
        assert!(quantization_sse(&samples, &large.entries) <= quantization_sse(&samples, &small.entries));
        assert_eq!(build_motion_bank(&grids, 8, 1, 50).unwrap(), small);
        assert!(small.entries.slice(ndarray::s![.., 2..]).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bank_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("motion_bank.bin");
        let bank = build_motion_bank(&[random_grid(5, 3, 4, 4, 4)], 5, 2, 10).unwrap();
        let info = MotionBankInfo { source_clip_count: 1, seed: 2, kmeans_iters: 10 };
        bank.save(&path, &info).unwrap();
        let (back, back_info) = MotionStatsBank::load(&path).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back_info, info);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12 + 5 * 6 * 4);
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(MotionStatsBank::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn zero_initialized_fusion_is_identity() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let fusion = Fusion::new(&mut ps, 4, 2 * 2 * 2, 2, 2).unwrap();
        let a = random_grid(6, 2, 4, 2, 2);
        let b = random_grid(7, 2, 4, 2, 2);
        let out = fuse(&a, &b, &fusion).unwrap();
        assert_eq!(out.dims(), a.dims());
        for (x, y) in out.values.iter().zip(a.values.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        let at = a.to_tensor(&Device::Cpu, DType::F64).unwrap().unsqueeze(0).unwrap();
        let bt = b.to_tensor(&Device::Cpu, DType::F64).unwrap().unsqueeze(0).unwrap();
        let (_, w) = fusion.forward_with_weights(&at, &bt, true).unwrap();
        let sums: Vec<f64> = w.unwrap().sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        let wrong = random_grid(8, 2, 4, 2, 1);
        assert!(fuse(&a, &wrong, &fusion).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matching_is_never_beaten(seed in 0u64..10_000, m in 1usize..40, f in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut entries = Array2::from_shape_fn((m, 2 * f), |_| rng.random_range(-1.0f32..1.0));
            entries.slice_mut(ndarray::s![.., f..]).mapv_inplace(f32::abs);
            let bank = MotionStatsBank::new(entries, f).unwrap();
            let stats = frame_channel_stats(&random_grid(seed + 1, f, 3, 2, 2));
            let matched = match_stats(&stats, &bank).unwrap();
            for y in 0..2 {
                for x in 0..2 {
                    let q = stats.location_vector(y, x);
                    let got = sqdist(&q, &matched.location_vector(y, x));
                    for r in bank.entries.outer_iter() {
                        prop_assert!(got <= sqdist(&q, r.as_slice().unwrap()));
                    }
                }
            }
        }

        #[test]
        fn modulation_moments(seed in 0u64..10_000, c in 2usize..16) {
            let eps = 1e-5;
            let z = random_grid(seed, 1, c, 1, 1);
            let stats = frame_channel_stats(&z);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let target = FrameStats {
                mu: Array3::from_elem((1, 1, 1), rng.random_range(-2.0..2.0)),
                sigma2: Array3::from_elem((1, 1, 1), rng.random_range(0.0..4.0)),
            };
            let (s2, t2) = (stats.sigma2[[0, 0, 0]] as f64, target.sigma2[[0, 0, 0]] as f64);
            let (s, t) = (s2.sqrt(), t2.sqrt());
            let out = frame_channel_stats(&modulate(&z, &stats, &target, ModulationVariant::AdainCorrected, eps).unwrap());
            prop_assert!((out.mu[[0, 0, 0]] - target.mu[[0, 0, 0]]).abs() < 1e-4);
            let std = (out.sigma2[[0, 0, 0]] as f64).sqrt();
            prop_assert!((std - t * s / (s + eps)).abs() <= 1e-3 * t.max(1e-3));
            let printed = frame_channel_stats(&modulate(&z, &stats, &target, ModulationVariant::AsPrinted, eps).unwrap());
            let expect = t2 * s2 / (t + eps).powi(2);
            prop_assert!((printed.sigma2[[0, 0, 0]] as f64 - expect).abs() <= 1e-4 * (1.0 + expect));
        }
    }
}
