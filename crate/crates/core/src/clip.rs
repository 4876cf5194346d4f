//! Frame-sequence container and frame-directory I/O.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, IoContext, Result};

pub const MIN_SIDE: usize = 8;

/// An `F×C×H×W` block of frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f32>,
    pub frame_rate: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>) -> Result<Self> {
        let (f, c, h, w) = frames.dim();
        if f == 0 {
            return Err(Error::Shape("clip must hold at least one frame".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("clip must have 1 or 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("clip value {v}")));
        }
        if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("clip values must lie in [0, 1]".into()));
        }
        Ok(Self { frames, frame_rate: None })
    }

    /// Builds a clip after clamping every value into `[0, 1]`.
    pub fn from_clamped(mut frames: Array4<f32>) -> Result<Self> {
        frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(frames)
    }

    pub fn from_frames(frames: &[Array3<f32>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("clip must hold at least one frame".into()))?;
        let (c, h, w) = first.dim();
        let mut data = Array4::<f32>::zeros((frames.len(), c, h, w));
        for (i, fr) in frames.iter().enumerate() {
            if fr.dim() != (c, h, w) {
                return Err(Error::InconsistentFrames(format!(
                    "frame {i} is {:?}, frame 0 is {:?}",
                    fr.dim(),
                    (c, h, w)
                )));
            }
            data.index_axis_mut(Axis(0), i).assign(fr);
        }
        Self::new(data)
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().1
    }

    pub fn height(&self) -> usize {
        self.frames.dim().2
    }

    pub fn width(&self) -> usize {
        self.frames.dim().3
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.num_frames() || len == 0 {
            return Err(Error::Shape(format!(
                "window {start}..{} outside clip of {} frames",
                start + len,
                self.num_frames()
            )));
        }
        let frames = self
            .frames
            .slice(ndarray::s![start..start + len, .., .., ..])
            .to_owned();
        Ok(Self { frames, frame_rate: self.frame_rate })
    }

    /// `F×C×H×W` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (f, c, h, w) = self.dims();
        let data: Vec<f32> = self.frames.iter().copied().collect();
        Ok(Tensor::from_vec(data, (f, c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`VideoClip::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (f, c, h, w) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let arr = Array4::from_shape_vec((f, c, h, w), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_clamped(arr)
    }

    /// Writes `000000.png, 000001.png, ...` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for t in 0..self.num_frames() {
            let img = frame_to_image(self.frame(t));
            img.save(dir.join(frame_file_name(t)))?;
        }
        Ok(())
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn frame_to_image(frame: ArrayView3<'_, f32>) -> DynamicImage {
    let (c, h, w) = frame.dim();
    if c == 1 {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(frame[[0, y as usize, x as usize]])])
        });
        DynamicImage::ImageLuma8(img)
    } else {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                to_u8(frame[[0, y, x]]),
                to_u8(frame[[1, y, x]]),
                to_u8(frame[[2, y, x]]),
            ])
        });
        DynamicImage::ImageRgb8(img)
    }
}

pub(crate) fn image_to_frame(img: &DynamicImage) -> Array3<f32> {
    use image::ColorType::*;
    let gray = matches!(img.color(), L8 | La8 | L16 | La16);
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        let buf = img.to_luma32f();
        Array3::from_shape_vec((1, h, w), buf.into_raw()).expect("luma buffer size")
    } else {
        let buf = img.to_rgb32f();
        let raw = buf.into_raw();
        let mut arr = Array3::<f32>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    arr[[ch, y, x]] = raw[(y * w + x) * 3 + ch];
                }
            }
        }
        arr
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Image files of a clip directory in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads the first `frame_count` frames of `dir`, normalized to `[0, 1]`.
pub fn load_clip(dir: &Path, frame_count: usize) -> Result<VideoClip> {
    let files = list_frame_files(dir)?;
    if files.len() < frame_count || frame_count == 0 {
        return Err(Error::InsufficientFrames {
            path: dir.to_path_buf(),
            found: files.len(),
            requested: frame_count,
        });
    }
    let mut frames = Vec::with_capacity(frame_count);
    for path in &files[..frame_count] {
        let img = image::open(path)?;
        let frame = image_to_frame(&img);
        if let Some(first) = frames.first() {
            let first: &Array3<f32> = first;
            if first.dim() != frame.dim() {
                return Err(Error::InconsistentFrames(format!(
                    "{} is {:?}, first frame is {:?}",
                    path.display(),
                    frame.dim(),
                    first.dim()
                )));
            }
        }
        frames.push(frame);
    }
    VideoClip::from_frames(&frames)
}

/// Loads every frame in `dir`.
pub fn load_all_frames(dir: &Path) -> Result<VideoClip> {
    let n = list_frame_files(dir)?.len();
    load_clip(dir, n)
}

/// Stacks equally shaped clips into a `B×F×C×H×W` tensor.
pub fn batch_tensor(clips: &[&VideoClip], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let dims = first.dims();
    let mut ts = Vec::with_capacity(clips.len());
    for c in clips {
        if c.dims() != dims {
            return Err(Error::Shape(format!("batch clip {:?} differs from {:?}", c.dims(), dims)));
        }
        ts.push(c.to_tensor(device, dtype)?);
    }
    Ok(Tensor::stack(&ts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(dir: &Path, n: usize, value: u8, side: u32) {
        fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let img = GrayImage::from_pixel(side, side, image::Luma([value]));
            img.save(dir.join(frame_file_name(i))).unwrap();
        }
    }

    #[test]
    fn loads_requested_prefix() {
        let tmp = tempfile::tempdir().unwrap();
        write_gray(tmp.path(), 10, 128, 16);
        let clip = load_clip(tmp.path(), 8).unwrap();
        assert_eq!(clip.dims(), (8, 1, 16, 16));
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_gray(tmp.path(), 3, 0, 16);
        let err = load_clip(tmp.path(), 8).unwrap_err();
        assert!(matches!(err, Error::InsufficientFrames { found: 3, requested: 8, .. }));
        assert!(err.to_string().contains("insufficient frames"));
    }

    #[test]
    fn white_gray_frames_normalize_to_one() {
        let tmp = tempfile::tempdir().unwrap();
        write_gray(tmp.path(), 2, 255, 8);
        let clip = load_clip(tmp.path(), 2).unwrap();
        assert!(clip.frames().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_directory() {
        let err = load_clip(Path::new("/definitely/not/here"), 1).unwrap_err();
        assert!(matches!(err, Error::MissingDirectory(_)));
    }

    #[test]
    fn mismatched_frame_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        write_gray(tmp.path(), 1, 0, 16);
        GrayImage::from_pixel(8, 8, image::Luma([0]))
            .save(tmp.path().join(frame_file_name(1)))
            .unwrap();
        assert!(matches!(load_clip(tmp.path(), 2), Err(Error::InconsistentFrames(_))));
    }

    #[test]
    fn save_then_load_is_exact_on_8bit_grid() {
        let tmp = tempfile::tempdir().unwrap();
        let frames = Array4::from_shape_fn((2, 3, 8, 12), |(f, c, y, x)| {
            ((f * 31 + c * 17 + y * 5 + x) % 256) as f32 / 255.0
        });
        let clip = VideoClip::new(frames).unwrap();
        clip.save(tmp.path()).unwrap();
        let back = load_clip(tmp.path(), 2).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut frames = Array4::<f32>::zeros((1, 1, 8, 8));
        frames[[0, 0, 0, 0]] = 1.5;
        assert!(VideoClip::new(frames).is_err());
        assert!(VideoClip::new(Array4::zeros((1, 2, 8, 8))).is_err());
        assert!(VideoClip::new(Array4::zeros((1, 1, 4, 8))).is_err());
    }
}
