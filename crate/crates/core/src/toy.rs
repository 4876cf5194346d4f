//! Procedurally rendered cartoon-face clips used for smoke tests and the
//! end-to-end toy pipeline.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub clips: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { clips: 10, frames: 8, size: 64, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rgb([f32; 3]);

#[derive(Debug, Clone)]
struct Face {
    background: [Rgb; 2],
    skin: Rgb,
    hair: Rgb,
    iris: Rgb,
    lips: Rgb,
    center: (f32, f32),
    drift: (f32, f32),
    phase: f32,
    radius: (f32, f32),
    eye_gap: f32,
    blink_frame: Option<usize>,
    gaze_speed: f32,
    talk_speed: f32,
}

fn color(rng: &mut ChaCha8Rng, lo: [f32; 3], hi: [f32; 3]) -> Rgb {
    Rgb([0, 1, 2].map(|i| rng.random_range(lo[i]..=hi[i])))
}

impl Face {
    fn random(rng: &mut ChaCha8Rng, frames: usize) -> Self {
        Self {
            background: [
                color(rng, [0.1, 0.1, 0.2], [0.6, 0.7, 0.9]),
                color(rng, [0.1, 0.1, 0.2], [0.6, 0.7, 0.9]),
            ],
            skin: color(rng, [0.55, 0.35, 0.25], [0.98, 0.85, 0.75]),
            hair: color(rng, [0.05, 0.03, 0.0], [0.5, 0.35, 0.2]),
            iris: color(rng, [0.1, 0.2, 0.1], [0.4, 0.6, 0.8]),
            lips: color(rng, [0.6, 0.15, 0.15], [0.9, 0.4, 0.4]),
            center: (rng.random_range(0.45..0.55), rng.random_range(0.48..0.56)),
            drift: (rng.random_range(-0.008..0.008), rng.random_range(-0.006..0.006)),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            radius: (rng.random_range(0.24..0.3), rng.random_range(0.3..0.36)),
            eye_gap: rng.random_range(0.3..0.4),
            blink_frame: rng.random_bool(0.6).then(|| rng.random_range(0..frames)),
            gaze_speed: rng.random_range(0.3..0.9),
            talk_speed: rng.random_range(0.5..1.5),
        }
    }
}

/// Anti-aliased coverage of an axis-aligned ellipse at pixel `(x, y)`.
fn ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32, px: f32) -> f32 {
    let (dx, dy) = ((x - cx) / rx.max(1e-4), (y - cy) / ry.max(1e-4));
    let r = (dx * dx + dy * dy).sqrt();
    // approximate signed distance in pixels along the radial direction
    let dist = (r - 1.0) * rx.min(ry) / px;
    (0.5 - dist).clamp(0.0, 1.0)
}

fn paint(px: &mut [f32; 3], c: Rgb, a: f32) {
    for i in 0..3 {
        px[i] = px[i] * (1.0 - a) + c.0[i] * a;
    }
}

fn render_frame(face: &Face, t: usize, size: usize, out: &mut Array4<f32>) {
    let tf = t as f32;
    let cx = face.center.0 + face.drift.0 * tf + 0.01 * (face.phase + 0.4 * tf).sin();
    let cy = face.center.1 + face.drift.1 * tf;
    let (rx, ry) = face.radius;
    let px = 1.0 / size as f32;
    let blink = match face.blink_frame {
        Some(b) if b == t => 0.15,
        Some(b) if b.abs_diff(t) == 1 => 0.55,
        _ => 1.0,
    };
    let gaze = 0.02 * (face.phase + face.gaze_speed * tf).sin();
    let mouth_open = 0.25 + 0.75 * (0.5 + 0.5 * (face.phase * 1.7 + face.talk_speed * tf).sin());
    let eye_y = cy - 0.08;
    let eye_dx = face.eye_gap * rx;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f32 + 0.5) * px, (y as f32 + 0.5) * px);
            let mut p = face.background[0].0;
            let mix = fy;
            paint(&mut p, face.background[1], mix);
            paint(&mut p, face.hair, ellipse(fx, fy, cx, cy - 0.07, rx * 1.1, ry * 0.95, px));
            paint(&mut p, face.skin, ellipse(fx, fy, cx, cy + 0.02, rx, ry * 0.92, px));
            for side in [-1.0f32, 1.0] {
                let ex = cx + side * eye_dx;
                let (erx, ery) = (0.07, 0.045 * blink);
                paint(&mut p, Rgb([0.97, 0.97, 0.97]), ellipse(fx, fy, ex, eye_y, erx, ery, px));
                let iris = ellipse(fx, fy, ex + gaze, eye_y, 0.035, 0.035 * blink.min(1.0), px)
                    * ellipse(fx, fy, ex, eye_y, erx, ery, px);
                paint(&mut p, face.iris, iris);
                let pupil = ellipse(fx, fy, ex + gaze, eye_y, 0.015, 0.015 * blink, px)
                    * ellipse(fx, fy, ex, eye_y, erx, ery, px);
                paint(&mut p, Rgb([0.02, 0.02, 0.02]), pupil);
                paint(&mut p, face.hair, ellipse(fx, fy, ex, eye_y - 0.07, 0.07, 0.012, px));
            }
            paint(&mut p, Rgb([face.skin.0[0] * 0.8, face.skin.0[1] * 0.7, face.skin.0[2] * 0.65]),
                ellipse(fx, fy, cx, cy + 0.04, 0.025, 0.05, px));
            let my = cy + 0.17;
            paint(&mut p, face.lips, ellipse(fx, fy, cx, my, 0.1, 0.03 + 0.02 * mouth_open, px));
            paint(&mut p, Rgb([0.25, 0.05, 0.05]), ellipse(fx, fy, cx, my, 0.07, 0.03 * mouth_open, px));
            for c in 0..3 {
                out[[t, c, y, x]] = p[c].clamp(0.0, 1.0);
            }
        }
    }
}

/// One clip of `frames` RGB frames of `size×size` pixels.
pub fn render_face_clip(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> VideoClip {
    let face = Face::random(rng, frames);
    let mut out = Array4::zeros((frames, 3, size, size));
    for t in 0..frames {
        render_frame(&face, t, size, &mut out);
    }
    VideoClip::new(out).expect("rendered frames lie in [0, 1]")
}

/// In-memory toy dataset.
pub fn toy_clips(cfg: &ToyConfig) -> Vec<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.clips).map(|_| render_face_clip(&mut rng, cfg.frames, cfg.size)).collect()
}

pub fn toy_clip_id(i: usize) -> String {
    format!("clip_{i:04}")
}

/// Writes `dir/<clip_id>/NNNNNN.png` for every toy clip and returns the clip
/// directories.
pub fn write_toy_dataset(dir: &Path, cfg: &ToyConfig) -> Result<Vec<PathBuf>> {
    toy_clips(cfg)
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let d = dir.join(toy_clip_id(i));
            clip.save(&d)?;
            Ok(d)
        })
        .collect()
}
