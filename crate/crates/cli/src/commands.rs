use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use dptempcoh::clip::{list_frame_files, load_all_frames};
use dptempcoh::degrade::{write_manifest_csv, JPEG_CODEC_ID};
use dptempcoh::metrics::evaluate_set;
use dptempcoh::pipeline::{
    build_motion_bank_for, clip_dirs, degrade_set, extractor_for, load_clip_set, pretrain_codec,
    restore_clip, train_restoration, training_windows, RunOptions,
};
use dptempcoh::predictor::{attention_dir, export_attention_maps, save_attention_maps};
use dptempcoh::toy::write_toy_dataset;
use dptempcoh::{Checkpoint, Codec, Config, Error, FeatureGrid, MotionStatsBank, RestorationModel, Result, RunManifest};

use crate::{settings, Cli, Command};

const CODEC_FILE: &str = "codec.ckpt";
const MODEL_FILE: &str = "model.ckpt";
const MOTION_BANK_FILE: &str = "motion_bank.bin";
const LOG_FILE: &str = "log.jsonl";
const CONFIG_FILE: &str = "config.json";

/// How a command should treat an existing output directory.
#[derive(Debug, PartialEq, Eq)]
enum State {
    Done,
    Resume,
    Fresh,
}

fn state(dir: &Path, digest: &str, force: bool) -> State {
    if force {
        return State::Fresh;
    }
    match RunManifest::load(dir) {
        Ok(m) if m.config_digest == digest && m.complete => {
            log::info!("{} is up to date; pass --force to rebuild", dir.display());
            State::Done
        }
        Ok(m) if m.config_digest == digest => State::Resume,
        Ok(_) => {
            log::warn!("{} was built with a different config; rebuilding", dir.display());
            State::Fresh
        }
        Err(_) => State::Fresh,
    }
}

/// Removes step checkpoints left by an earlier run.
fn clear_checkpoints(dir: &Path) -> Result<()> {
    while let Some((_, p)) = dptempcoh::pipeline::latest_checkpoint(dir) {
        std::fs::remove_file(&p).map_err(|source| Error::Io { path: p, source })?;
    }
    Ok(())
}

/// Complete manifest of an upstream stage, or a missing-prerequisite error.
fn require(dir: &Path, stage: &str) -> Result<RunManifest> {
    RunManifest::load_complete(dir).ok_or_else(|| {
        Error::MissingArtifact(format!("no complete `{stage}` output at {} (run `dptempcoh {stage}` first)", dir.display()))
    })
}

fn add_parent_if_present(m: &mut RunManifest, dir: &Path) -> Result<()> {
    if RunManifest::load_complete(dir).is_some() {
        m.add_parent(dir)?;
    }
    Ok(())
}

fn run_id(dir: &Path) -> String {
    dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string()
}

fn start(cfg: &Config, command: &str, dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(RunManifest::new(command, run_id(dir), cfg.digest(), cfg.effective_seed()))
}

fn finish(mut m: RunManifest, dir: &Path) -> Result<()> {
    m.complete = true;
    m.save(dir)?;
    log::info!("wrote {}", RunManifest::path_in(dir).display());
    Ok(())
}

fn load_model(dir: &Path) -> Result<RestorationModel> {
    require(dir, "train")?;
    let bank_path = dir.join(MOTION_BANK_FILE);
    let bank = if bank_path.exists() { Some(MotionStatsBank::load(&bank_path)?.0) } else { None };
    RestorationModel::from_checkpoint(&Checkpoint::load(&dir.join(MODEL_FILE))?, bank, DType::F32, &Device::Cpu)
}

/// `(id, dir)` pairs: the clip directories under `input`, or `input` itself
/// when it directly holds frames.
fn input_clips(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() && !list_frame_files(input)?.is_empty() {
        return Ok(vec![(run_id(input), input.to_path_buf())]);
    }
    let dirs = clip_dirs(input)?;
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(format!("no clips under {}", input.display())));
    }
    Ok(dirs)
}

fn parse_query(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("query {s:?} is not f,y,x")))?;
    match v[..] {
        [f, y, x] => Ok((f, y, x)),
        _ => Err(Error::Config(format!("query {s:?} is not f,y,x"))),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = settings::resolve(cli)?;
    let wd = |p: &Path| cli.workdir.join(p);
    match &cli.command {
        Command::ToyData { out, clips, frames, size } => {
            let out = wd(out);
            cfg.toy.clips = clips.unwrap_or(cfg.toy.clips);
            cfg.toy.frames = frames.unwrap_or(cfg.toy.frames);
            cfg.toy.size = size.unwrap_or(cfg.toy.size);
            if state(&out, &cfg.digest(), cli.force) == State::Done {
                return Ok(());
            }
            let mut m = start(&cfg, "toy-data", &out)?;
            m.outputs = write_toy_dataset(&out, &cfg.toy)?;
            finish(m, &out)
        }
        Command::Degrade { input, out, rho, b, sigma, w, per_frame } => {
            let (input, out) = (wd(input), wd(out));
            let r = &mut cfg.degradation.ranges;
            r.rho_range = rho.unwrap_or(r.rho_range);
            r.b_range = b.unwrap_or(r.b_range);
            r.sigma_range = sigma.unwrap_or(r.sigma_range);
            r.w_range = w.unwrap_or(r.w_range);
            cfg.degradation.per_frame |= per_frame;
            cfg.degradation.ranges.validate()?;
            if !input.is_dir() {
                return Err(Error::MissingDirectory(input));
            }
            if state(&out, &cfg.digest(), cli.force) == State::Done {
                return Ok(());
            }
            let mut m = start(&cfg, "degrade", &out)?;
            m.seed = cfg.degradation.ranges.seed;
            m.inputs.push(input.clone());
            add_parent_if_present(&mut m, &input)?;
            let rows = degrade_set(&input, &out, &cfg.degradation.ranges, cfg.degradation.per_frame)?;
            let csv = out.join("manifest.csv");
            write_manifest_csv(&csv, &rows)?;
            m.outputs = clip_dirs(&out)?.into_iter().map(|(_, p)| p).collect();
            m.outputs.push(csv);
            m.notes.insert("jpeg_codec".into(), JPEG_CODEC_ID.into());
            finish(m, &out)
        }
        Command::PretrainCodec { data, run_id } => {
            let (data, dir) = (wd(data), cli.workdir.join("runs").join(run_id));
            let digest = cfg.digest();
            let st = state(&dir, &digest, cli.force);
            if st == State::Done {
                return Ok(());
            }
            if st == State::Fresh {
                clear_checkpoints(&dir)?;
            }
            let set = load_clip_set(&data)?;
            let windows = training_windows(&set.clips, cfg.codec.clip_frames)?;
            let mut m = start(&cfg, "pretrain-codec", &dir)?;
            m.inputs.push(data.clone());
            add_parent_if_present(&mut m, &data)?;
            m.save(&dir)?;
            let opts = RunOptions {
                run_dir: dir.clone(),
                log_path: Some(dir.join(LOG_FILE)),
                ckpt_every: cfg.train.ckpt_every,
                digest: digest.clone(),
                resume: st == State::Resume,
            };
            let (trainer, written) = pretrain_codec(&cfg, &windows, &opts, |r| {
                if r.step % 50 == 0 || r.step == cfg.codec.iterations {
                    log::info!("codec step {} recon {:.4} total {:.4}", r.step, r.recon_l1, r.total);
                }
            })?;
            let final_path = dir.join(CODEC_FILE);
            trainer.codec.to_checkpoint(trainer.step as u64, &digest)?.save(&final_path)?;
            m.checkpoints = written;
            m.outputs = vec![final_path, dir.join(LOG_FILE)];
            finish(m, &dir)
        }
        Command::BuildMotionBank { codec, data, out } => {
            let (codec_dir, data, out) = (wd(codec), wd(data), wd(out));
            require(&codec_dir, "pretrain-codec")?;
            if state(&out, &cfg.digest(), cli.force) == State::Done {
                return Ok(());
            }
            let codec = Codec::from_checkpoint(&Checkpoint::load(&codec_dir.join(CODEC_FILE))?, DType::F32, &Device::Cpu)?;
            let set = load_clip_set(&data)?;
            let windows = training_windows(&set.clips, codec.config.clip_frames)?;
            let mut m = start(&cfg, "build-motion-bank", &out)?;
            m.add_parent(&codec_dir)?;
            add_parent_if_present(&mut m, &data)?;
            m.inputs = vec![codec_dir.join(CODEC_FILE), data];
            let (bank, info) = build_motion_bank_for(&cfg, &codec, &windows)?;
            let path = out.join(MOTION_BANK_FILE);
            bank.save(&path, &info)?;
            log::info!("motion bank: {} entries from {} windows", bank.size(), info.source_clip_count);
            m.outputs = vec![path.clone(), path.with_extension("json")];
            finish(m, &out)
        }
        Command::Train { codec, motion_bank, data, run_id } => {
            let (codec_dir, bank_dir, data) = (wd(codec), wd(motion_bank), wd(data));
            let dir = cli.workdir.join("runs").join(run_id);
            require(&codec_dir, "pretrain-codec")?;
            if cfg.motion.enabled {
                require(&bank_dir, "build-motion-bank")?;
            }
            let digest = cfg.digest();
            let st = state(&dir, &digest, cli.force);
            if st == State::Done {
                return Ok(());
            }
            if st == State::Fresh {
                clear_checkpoints(&dir)?;
            }
            let frozen = Codec::from_checkpoint(&Checkpoint::load(&codec_dir.join(CODEC_FILE))?, DType::F32, &Device::Cpu)?;
            if frozen.config != cfg.codec {
                log::warn!("codec checkpoint config differs from the current codec section; using the checkpoint's");
            }
            let mut m = start(&cfg, "train", &dir)?;
            m.add_parent(&codec_dir)?;
            m.inputs = vec![codec_dir.join(CODEC_FILE), data.clone()];
            let bank = if cfg.motion.enabled {
                m.add_parent(&bank_dir)?;
                let src = bank_dir.join(MOTION_BANK_FILE);
                let (bank, info) = MotionStatsBank::load(&src)?;
                bank.save(&dir.join(MOTION_BANK_FILE), &info)?;
                m.inputs.push(src);
                Some(bank)
            } else {
                None
            };
            add_parent_if_present(&mut m, &data)?;
            m.save(&dir)?;
            let set = load_clip_set(&data)?;
            let windows = training_windows(&set.clips, frozen.config.clip_frames)?;
            let opts = RunOptions {
                run_dir: dir.clone(),
                log_path: Some(dir.join(LOG_FILE)),
                ckpt_every: cfg.train.ckpt_every,
                digest: digest.clone(),
                resume: st == State::Resume,
            };
            let (trainer, written) = train_restoration(&cfg, frozen, bank, &windows, &opts, |r| {
                if r.step % 50 == 0 || r.step == cfg.train.iterations {
                    log::info!("train step {} consi {:.4} bank {:.4} adv_d {:.4}", r.step, r.consi, r.bank, r.adv_d);
                }
            })?;
            let final_path = dir.join(MODEL_FILE);
            trainer.model.to_checkpoint(trainer.step as u64, &digest)?.save(&final_path)?;
            m.checkpoints = written;
            m.outputs = vec![final_path, dir.join(LOG_FILE)];
            finish(m, &dir)
        }
        Command::Restore { model, input, out, no_motion } => {
            let (model_dir, input, out) = (wd(model), wd(input), wd(out));
            let clips = input_clips(&input)?;
            let model = load_model(&model_dir)?;
            let use_motion = model.motion_enabled() && !no_motion;
            if use_motion && model.motion_bank.is_none() {
                return Err(Error::MissingArtifact(format!("{} has no motion bank", model_dir.display())));
            }
            if state(&out, &cfg.digest(), cli.force) == State::Done {
                return Ok(());
            }
            let mut m = start(&cfg, "restore", &out)?;
            m.add_parent(&model_dir)?;
            add_parent_if_present(&mut m, &input)?;
            m.inputs = vec![model_dir.join(MODEL_FILE), input];
            m.notes.insert("motion".into(), use_motion.to_string());
            m.notes.insert("windowing".into(), format!("{} frames, stride {}, no overlap", model.meta.codec.clip_frames, model.meta.codec.clip_frames));
            for (id, dir) in clips {
                let clip = load_all_frames(&dir)?;
                let restored = restore_clip(&model, &clip, use_motion)?;
                let dst = out.join(&id);
                restored.save(&dst)?;
                log::info!("restored {id}: {} frames", restored.num_frames());
                m.outputs.push(dst);
            }
            finish(m, &out)
        }
        Command::Eval { restored, reference, out } => {
            let (restored, reference, out) = (wd(restored), wd(reference), wd(out));
            require(&restored, "restore")?;
            if state(&out, &cfg.digest(), cli.force) == State::Done {
                return Ok(());
            }
            let mut m = start(&cfg, "eval", &out)?;
            m.add_parent(&restored)?;
            add_parent_if_present(&mut m, &reference)?;
            m.inputs = vec![restored.clone(), reference.clone()];
            let extractor = extractor_for(&cfg, DType::F32, &Device::Cpu)?;
            let report = evaluate_set(&restored, &reference, &out, extractor.as_ref(), &m.config_digest)?;
            log::info!(
                "{} clips: psnr {} ifd {:.3} perceptual {:.4}",
                report.clips.len(),
                report.mean_psnr.map_or("inf".into(), |p| format!("{p:.3}")),
                report.mean_ifd,
                report.mean_perceptual
            );
            m.outputs = vec![out.join("report.json"), out.join("report.csv"), out.join("traces")];
            finish(m, &out)
        }
        Command::ExportAttention { model, input, query, mode, out } => {
            let (model_dir, input, out) = (wd(model), wd(input), wd(out));
            let q = parse_query(query)?;
            let model = load_model(&model_dir)?;
            let clip = load_all_frames(&input)?;
            let n = model.meta.codec.clip_frames;
            if clip.num_frames() < n {
                return Err(Error::InsufficientFrames { path: input, found: clip.num_frames(), requested: n });
            }
            let id = run_id(&input);
            let dir = attention_dir(&out, &id, q);
            let x = clip.window(0, n)?.to_tensor(model.device(), model.dtype())?.unsqueeze(0)?;
            let z = FeatureGrid::from_tensor(&model.encoder.forward(&x)?.squeeze(0)?, model.meta.codec.downscale)?;
            let maps = export_attention_maps(&z, &model.predictor, mode.unwrap_or(model.meta.predictor.mode), q)?;
            let mut m = start(&cfg, "export-attention", &dir)?;
            m.add_parent(&model_dir)?;
            m.inputs = vec![model_dir.join(MODEL_FILE), input];
            save_attention_maps(&dir, &maps)?;
            m.outputs = (0..maps.len()).map(|k| dir.join(format!("frame{k}.png"))).collect();
            m.outputs.push(dir.join("weights.csv"));
            finish(m, &dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_parsing() {
        assert_eq!(parse_query("1, 2,3").unwrap(), (1, 2, 3));
        assert!(parse_query("1,2").is_err());
        assert!(parse_query("a,b,c").is_err());
    }

    #[test]
    fn checkpoint_names_match_the_pipeline() {
        assert!(dptempcoh::pipeline::checkpoint_path(Path::new("r"), 5).ends_with("step_5.ckpt"));
    }
}
