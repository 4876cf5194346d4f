//! End-to-end orchestration shared by the command-line tool and the tests:
//! clip sets, training loops with logging and checkpoints, motion-bank
//! construction and windowed restoration.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::clip::{batch_tensor, load_all_frames, VideoClip};
use crate::codec::{Codec, CodecLossRecord, CodecTrainer};
use crate::config::Config;
use crate::degrade::{degrade_clip_with, DegradationRanges, ManifestRow};
use crate::error::{Error, IoContext, Result};
use crate::grid::FeatureGrid;
use crate::motion::{build_motion_bank, MotionBankInfo, MotionSource, MotionStatsBank};
use crate::perceptual::{build_extractor, FeatureExtractor};
use crate::training::{LossLog, LossRecord, RestorationModel, Stage2Trainer};

/// Clip directories (sorted by name) under `dir`.
pub fn clip_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).at(dir)? {
        let p = e.at(dir)?.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.push((name.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ClipSet {
    pub ids: Vec<String>,
    pub clips: Vec<VideoClip>,
}

pub fn load_clip_set(dir: &Path) -> Result<ClipSet> {
    let mut ids = Vec::new();
    let mut clips = Vec::new();
    for (id, p) in clip_dirs(dir)? {
        clips.push(load_all_frames(&p)?);
        ids.push(id);
    }
    if clips.is_empty() {
        return Err(Error::MissingArtifact(format!("no clip directories under {}", dir.display())));
    }
    Ok(ClipSet { ids, clips })
}

/// Non-overlapping `frames`-long windows of every clip.
pub fn training_windows(clips: &[VideoClip], frames: usize) -> Result<Vec<VideoClip>> {
    let mut out = Vec::new();
    for c in clips {
        if c.num_frames() < frames {
            return Err(Error::InsufficientFrames { path: PathBuf::new(), found: c.num_frames(), requested: frames });
        }
        for start in (0..=c.num_frames() - frames).step_by(frames) {
            out.push(c.window(start, frames)?);
        }
    }
    Ok(out)
}

/// Independent random stream for one training step.
pub fn step_rng(seed: u64, step: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step as u64);
    rng
}

fn sample_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.into_iter().cycle().take(size).collect()
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("step_{step}.ckpt"))
}

/// Highest-step checkpoint in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(run_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let step = name.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, p))
        })
        .max_by_key(|(s, _)| *s)
}

/// Where a training run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    pub log_path: Option<PathBuf>,
    pub ckpt_every: usize,
    pub digest: String,
    /// Pick up from the newest checkpoint in `run_dir` when present.
    pub resume: bool,
}

impl RunOptions {
    fn should_save(&self, step: usize, last: usize) -> bool {
        step == last || (self.ckpt_every > 0 && step % self.ckpt_every == 0)
    }
}

pub fn extractor_for(cfg: &Config, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    build_extractor(cfg.perceptual.extractor, &cfg.perceptual.pyramid, cfg.codec.in_channels, dtype, device)
}

/// Stage-1 codec pretraining. Returns the trainer and the checkpoints written.
pub fn pretrain_codec(
    cfg: &Config,
    windows: &[VideoClip],
    opts: &RunOptions,
    mut progress: impl FnMut(&CodecLossRecord),
) -> Result<(CodecTrainer, Vec<PathBuf>)> {
    let (dev, dt) = (Device::Cpu, DType::F32);
    let codec = Codec::new(cfg.codec.clone(), dt, &dev)?;
    let mut trainer = CodecTrainer::new(codec, extractor_for(cfg, dt, &dev)?)?;
    if opts.resume {
        if let Some((_, p)) = latest_checkpoint(&opts.run_dir) {
            log::info!("resuming codec pretraining from {}", p.display());
            trainer.resume_from(&Checkpoint::load(&p)?)?;
        }
    }
    let mut log = opts.log_path.as_deref().map(LossLog::open).transpose()?;
    let mut written = Vec::new();
    let total = cfg.codec.iterations;
    while trainer.step < total {
        let mut rng = step_rng(cfg.codec.seed, trainer.step, 0xc0dec);
        let idx = sample_batch(windows.len(), cfg.codec.batch_size, &mut rng);
        let batch = batch_tensor(&idx.iter().map(|&i| &windows[i]).collect::<Vec<_>>(), &dev, dt)?;
        let rec = trainer.train_step(&batch)?;
        if let Some(l) = log.as_mut() {
            l.write(&rec)?;
        }
        progress(&rec);
        if opts.should_save(trainer.step, total) {
            let p = checkpoint_path(&opts.run_dir, trainer.step);
            trainer.to_checkpoint(&opts.digest)?.save(&p)?;
            written.push(p);
        }
    }
    Ok((trainer, written))
}

/// Token grids the motion bank is built from.
pub fn motion_features(codec: &Codec, windows: &[VideoClip], source: MotionSource) -> Result<Vec<FeatureGrid>> {
    windows
        .iter()
        .map(|w| {
            let z = codec.encode(w)?;
            Ok(match source {
                MotionSource::Encoder => z,
                MotionSource::Quantized => codec.quantize(&z)?.1,
            })
        })
        .collect()
}

pub fn build_motion_bank_for(cfg: &Config, codec: &Codec, windows: &[VideoClip]) -> Result<(MotionStatsBank, MotionBankInfo)> {
    let grids = motion_features(codec, windows, cfg.motion.motion_source)?;
    let seed = cfg.effective_seed();
    let bank = build_motion_bank(&grids, cfg.motion.bank_size_motion, seed, cfg.motion.kmeans_iters)?;
    Ok((bank, MotionBankInfo { source_clip_count: windows.len(), seed, kmeans_iters: cfg.motion.kmeans_iters }))
}

/// Low-quality counterparts of `hq` drawn with `rng`.
pub fn degrade_batch(hq: &[&VideoClip], ranges: &DegradationRanges, per_frame: bool, rng: &mut ChaCha8Rng) -> Result<Vec<VideoClip>> {
    hq.iter().map(|c| Ok(degrade_clip_with(c, ranges, !per_frame, rng)?.0)).collect()
}

/// Stage-2 restoration training with degradations synthesized on the fly.
pub fn train_restoration(
    cfg: &Config,
    frozen: Codec,
    motion_bank: Option<MotionStatsBank>,
    windows: &[VideoClip],
    opts: &RunOptions,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(Stage2Trainer, Vec<PathBuf>)> {
    let first = windows.first().ok_or_else(|| Error::MissingArtifact("no training clips".into()))?;
    let (dev, dt) = (frozen.device().clone(), frozen.dtype());
    let size = (first.height(), first.width());
    let model = RestorationModel::from_codec(&frozen, cfg.predictor.clone(), cfg.motion.clone(), size, motion_bank, cfg.train.seed)?;
    let extractor = extractor_for(cfg, dt, &dev)?;
    let mut trainer = Stage2Trainer::new(cfg.train.clone(), model, frozen, extractor)?;
    if opts.resume {
        if let Some((_, p)) = latest_checkpoint(&opts.run_dir) {
            log::info!("resuming restoration training from {}", p.display());
            trainer.resume_from(&Checkpoint::load(&p)?)?;
            trainer.last_checkpoint = Some(p);
        }
    }
    let mut log = opts.log_path.as_deref().map(LossLog::open).transpose()?;
    let mut written = Vec::new();
    let total = cfg.train.iterations;
    while trainer.step < total {
        let mut rng = step_rng(cfg.train.seed, trainer.step, 0x57a9e2);
        let idx = sample_batch(windows.len(), cfg.train.batch_size, &mut rng);
        let hq: Vec<&VideoClip> = idx.iter().map(|&i| &windows[i]).collect();
        let lq = degrade_batch(&hq, &cfg.degradation.ranges, cfg.degradation.per_frame, &mut rng)?;
        let lq_t = batch_tensor(&lq.iter().collect::<Vec<_>>(), &dev, dt)?;
        let hq_t = batch_tensor(&hq, &dev, dt)?;
        let rec = trainer.train_step(&lq_t, &hq_t)?;
        if let Some(l) = log.as_mut() {
            l.write(&rec)?;
        }
        progress(&rec);
        if opts.should_save(trainer.step, total) {
            let p = checkpoint_path(&opts.run_dir, trainer.step);
            trainer.save_checkpoint(&p, &opts.digest)?;
            written.push(p);
        }
    }
    Ok((trainer, written))
}

/// Restores a clip of any length by non-overlapping windows of the model's
/// clip length. A short final window is padded by repeating its last frame
/// and cropped back afterwards.
pub fn restore_clip(model: &RestorationModel, clip: &VideoClip, use_motion: bool) -> Result<VideoClip> {
    let n = model.meta.codec.clip_frames;
    let f = clip.num_frames();
    let mut frames = Vec::with_capacity(f);
    for start in (0..f).step_by(n) {
        let len = n.min(f - start);
        let mut window: Vec<_> = (start..start + len).map(|t| clip.frame(t).to_owned()).collect();
        while window.len() < n {
            window.push(window[len - 1].clone());
        }
        let restored = model.restore_window(&VideoClip::from_frames(&window)?, use_motion)?;
        frames.extend((0..len).map(|t| restored.frame(t).to_owned()));
    }
    let mut out = VideoClip::from_frames(&frames)?;
    out.frame_rate = clip.frame_rate;
    Ok(out)
}

/// Degrades every clip under `input` into `output/<clip_id>`, one seed per
/// clip, and returns the manifest rows.
pub fn degrade_set(input: &Path, output: &Path, ranges: &DegradationRanges, per_frame: bool) -> Result<Vec<ManifestRow>> {
    ranges.validate()?;
    let dirs = clip_dirs(input)?;
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(format!("no clip directories under {}", input.display())));
    }
    let mut rows = Vec::new();
    for (i, (id, dir)) in dirs.iter().enumerate() {
        let clip = load_all_frames(dir)?;
        let seed = ranges.seed.wrapping_add(i as u64);
        let mut rng = ranges.with_seed(seed).rng();
        let (lq, params) = degrade_clip_with(&clip, ranges, !per_frame, &mut rng)?;
        let out = output.join(id);
        lq.save(&out)?;
        for p in params {
            rows.push(ManifestRow {
                clip_id: id.clone(),
                hq_dir: dir.display().to_string(),
                lq_dir: out.display().to_string(),
                seed,
                rho: p.blur_sigma,
                b: p.down_factor,
                sigma: p.noise_sigma,
                w: p.jpeg_quality,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{write_toy_dataset, ToyConfig};

    #[test]
    fn windows_and_latest_checkpoint() {
        let clips = crate::toy::toy_clips(&ToyConfig { clips: 2, frames: 10, size: 16, seed: 1 });
        let w = training_windows(&clips, 4).unwrap();
        assert_eq!(w.len(), 4);
        assert!(training_windows(&clips, 11).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(latest_checkpoint(dir.path()).is_none());
        for s in [5, 20, 10] {
            std::fs::write(checkpoint_path(dir.path(), s), b"").unwrap();
        }
        assert_eq!(latest_checkpoint(dir.path()).unwrap().0, 20);
    }

    #[test]
    fn degrade_set_is_deterministic() {
        let root = tempfile::tempdir().unwrap();
        let hq = root.path().join("hq");
        write_toy_dataset(&hq, &ToyConfig { clips: 2, frames: 3, size: 16, seed: 2 }).unwrap();
        let ranges = Config::toy().degradation.ranges.with_seed(5);
        let a = degrade_set(&hq, &root.path().join("a"), &ranges, false).unwrap();
        let b = degrade_set(&hq, &root.path().join("b"), &ranges, false).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.iter().map(|r| r.rho).collect::<Vec<_>>(), b.iter().map(|r| r.rho).collect::<Vec<_>>());
        for f in crate::clip::list_frame_files(&root.path().join("a/clip_0001")).unwrap() {
            let other = root.path().join("b/clip_0001").join(f.file_name().unwrap());
            assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(other).unwrap());
        }
        assert!(matches!(degrade_set(&root.path().join("none"), root.path(), &ranges, false), Err(Error::MissingDirectory(_))));
    }
}
