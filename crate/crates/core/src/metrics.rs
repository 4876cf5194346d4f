//! Restoration metrics and set-level evaluation reports.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize, Serializer};

use crate::clip::{load_all_frames, VideoClip};
use crate::error::{Error, IoContext, Result};
use crate::perceptual::FeatureExtractor;

fn same_dims(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("clips {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn mse(a: impl Iterator<Item = f32>, b: impl Iterator<Item = f32>) -> f64 {
    let (mut sum, mut n) = (0f64, 0usize);
    for (x, y) in a.zip(b) {
        sum += ((x - y) as f64).powi(2);
        n += 1;
    }
    sum / n.max(1) as f64
}

/// `10·log10(1 / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_dims(a, b)?;
    Ok(psnr_from_mse(mse(a.frames().iter().copied(), b.frames().iter().copied())))
}

/// Per-frame PSNR.
pub fn psnr_trace(a: &VideoClip, b: &VideoClip) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    Ok((0..a.num_frames())
        .map(|t| psnr_from_mse(mse(a.frame(t).iter().copied(), b.frame(t).iter().copied())))
        .collect())
}

/// Mean squared difference of consecutive frames in 0–255 units.
pub fn ifd(clip: &VideoClip) -> Result<f64> {
    let f = clip.num_frames();
    if f < 2 {
        return Err(Error::InsufficientFrames { path: Default::default(), found: f, requested: 2 });
    }
    let total: f64 = (0..f - 1)
        .map(|t| {
            let scale = |v: f32| v * 255.0;
            mse(clip.frame(t).iter().map(|&v| scale(v)), clip.frame(t + 1).iter().map(|&v| scale(v)))
        })
        .sum();
    Ok(total / (f - 1) as f64)
}

/// Per-frame feature distance: for each layer the RMS of the feature
/// difference, averaged over layers.
pub fn perceptual_trace(a: &VideoClip, b: &VideoClip, extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    let dev = Device::Cpu;
    let fa = extractor.features(&a.to_tensor(&dev, DType::F32)?)?;
    let fb = extractor.features(&b.to_tensor(&dev, DType::F32)?)?;
    let frames = a.num_frames();
    let mut trace = vec![0f64; frames];
    for (x, y) in fa.iter().zip(&fb) {
        let per_frame = (x - y)?
            .to_dtype(DType::F64)?
            .sqr()?
            .reshape((frames, ()))?
            .mean(1)?
            .sqrt()?
            .to_vec1::<f64>()?;
        for (t, v) in per_frame.into_iter().enumerate() {
            trace[t] += v / fa.len() as f64;
        }
    }
    Ok(trace)
}

pub fn perceptual_distance(a: &VideoClip, b: &VideoClip, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let trace = perceptual_trace(a, b, extractor)?;
    Ok(trace.iter().sum::<f64>() / trace.len() as f64)
}

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two sample sets (rows are
/// samples).
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    for x in [a, b] {
        if x.nrows() < 2 {
            return Err(Error::InsufficientSamples { found: x.nrows(), requested: 2 });
        }
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Globally pooled deepest features per frame, one row each.
pub fn pooled_features(clip: &VideoClip, extractor: &dyn FeatureExtractor) -> Result<Array2<f64>> {
    let x = clip.to_tensor(&Device::Cpu, DType::F32)?;
    let feats = extractor.features(&x)?;
    let last: &Tensor = feats.last().ok_or_else(|| Error::Config("extractor produced no features".into()))?;
    let (f, c, _, _) = last.dims4()?;
    let pooled = last.to_dtype(DType::F64)?.flatten_from(2)?.mean(2)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((f, c), pooled).map_err(|e| Error::Shape(e.to_string()))
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
    }
}

/// Formats a PSNR value, writing `inf` for identical inputs.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ifd: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    /// Mean over clips with finite PSNR; `None` when every clip is exact.
    pub mean_psnr: Option<f64>,
    pub psnr_infinite_count: usize,
    pub mean_ifd: f64,
    pub mean_perceptual: f64,
    pub frechet: Option<f64>,
    pub perceptual_extractor: String,
    pub config_digest: String,
}

impl MetricReport {
    pub fn from_clips(clips: Vec<ClipMetrics>, frechet: Option<f64>, extractor: &str, digest: &str) -> Self {
        let n = clips.len().max(1) as f64;
        let finite: Vec<f64> = clips.iter().map(|c| c.psnr).filter(|p| p.is_finite()).collect();
        Self {
            mean_psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            psnr_infinite_count: clips.len() - finite.len(),
            mean_ifd: clips.iter().map(|c| c.ifd).sum::<f64>() / n,
            mean_perceptual: clips.iter().map(|c| c.perceptual).sum::<f64>() / n,
            frechet,
            perceptual_extractor: extractor.to_string(),
            config_digest: digest.to_string(),
            clips,
        }
    }

    /// `report.json`, `report.csv` and `traces/` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).at(&json)?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["clip_id", "psnr", "ifd", "perceptual"])?;
        for c in &self.clips {
            w.write_record([c.clip_id.clone(), fmt_db(c.psnr), c.ifd.to_string(), c.perceptual.to_string()])?;
        }
        w.flush().at(&csv_path)
    }
}

/// Writes `traces/<clip_id>.csv` with columns `frame, perceptual, psnr`.
pub fn save_trace(dir: &Path, clip_id: &str, perceptual: &[f64], psnr: &[f64]) -> Result<()> {
    let tdir = dir.join("traces");
    std::fs::create_dir_all(&tdir).at(&tdir)?;
    let path = tdir.join(format!("{clip_id}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["frame", "perceptual", "psnr"])?;
    for (t, (p, q)) in perceptual.iter().zip(psnr).enumerate() {
        w.write_record([t.to_string(), p.to_string(), fmt_db(*q)])?;
    }
    w.flush().at(&path)
}

fn clip_ids(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut ids = BTreeSet::new();
    for e in std::fs::read_dir(dir).at(dir)? {
        let p = e.at(dir)?.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                ids.insert(name.to_string());
            }
        }
    }
    Ok(ids)
}

/// Per-clip metrics of `restored_dir/<id>` against `reference_dir/<id>`;
/// writes the report and traces into `out_dir`.
pub fn evaluate_set(
    restored_dir: &Path,
    reference_dir: &Path,
    out_dir: &Path,
    extractor: &dyn FeatureExtractor,
    config_digest: &str,
) -> Result<MetricReport> {
    let restored = clip_ids(restored_dir)?;
    let reference = clip_ids(reference_dir)?;
    let only_restored: Vec<_> = restored.difference(&reference).cloned().collect();
    let only_reference: Vec<_> = reference.difference(&restored).cloned().collect();
    if !only_restored.is_empty() || !only_reference.is_empty() || restored.is_empty() {
        return Err(Error::Config(format!(
            "clip id mismatch: only in restored {only_restored:?}, only in reference {only_reference:?}"
        )));
    }
    let mut rows = Vec::new();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    for id in &restored {
        let a = load_all_frames(&restored_dir.join(id))?;
        let b = load_all_frames(&reference_dir.join(id))?;
        same_dims(&a, &b)?;
        let ptrace = perceptual_trace(&a, &b, extractor)?;
        let qtrace = psnr_trace(&a, &b)?;
        save_trace(out_dir, id, &ptrace, &qtrace)?;
        rows.push(ClipMetrics {
            clip_id: id.clone(),
            psnr: psnr(&a, &b)?,
            ifd: ifd(&a)?,
            perceptual: ptrace.iter().sum::<f64>() / ptrace.len() as f64,
        });
        fa.push(pooled_features(&a, extractor)?);
        fb.push(pooled_features(&b, extractor)?);
    }
    let stack = |v: &[Array2<f64>]| ndarray::concatenate(ndarray::Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>());
    let frechet = match (stack(&fa), stack(&fb)) {
        (Ok(a), Ok(b)) if a.nrows() >= 2 => Some(frechet_distance(&a, &b)?),
        _ => None,
    };
    let report = MetricReport::from_clips(rows, frechet, extractor.name(), config_digest);
    report.save(out_dir)?;
    Ok(report)
}
