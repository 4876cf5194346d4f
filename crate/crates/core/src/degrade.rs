//! Synthetic blind degradation: Gaussian blur, bicubic down/up-sampling,
//! additive Gaussian noise and a JPEG round-trip, applied in that order.

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::{to_u8, VideoClip};
use crate::error::{Error, Result};

/// Identity of the JPEG codec pair; written into degradation manifests because
/// bit-exact determinism only holds for a fixed codec.
pub const JPEG_CODEC_ID: &str = "image-0.25/jpeg-encoder+zune-jpeg";

/// Smallest blur standard deviation used; smaller draws are clamped up to it.
pub const MIN_BLUR_SIGMA: f64 = 1e-3;

/// Legal domains of the sampled parameters (union of the jittered brackets).
pub const RHO_DOMAIN: (f64, f64) = (0.0, 11.0);
pub const B_DOMAIN: (f64, f64) = (1.0, 33.0);
pub const SIGMA_DOMAIN: (f64, f64) = (0.0, 11.0);
pub const W_DOMAIN: (f64, f64) = (1.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    /// Downsampling scale factor.
    pub down_factor: f64,
    /// Noise standard deviation in 0–255 units.
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
}

impl DegradationParams {
    /// Parameters whose only effect is the 8-bit JPEG round-trip at quality 100.
    pub fn near_identity() -> Self {
        Self {
            blur_sigma: MIN_BLUR_SIGMA,
            down_factor: 1.0,
            noise_sigma: 0.0,
            jpeg_quality: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi == self.lo {
            return self.lo;
        }
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }

    fn within(&self, domain: (f64, f64)) -> bool {
        self.lo.is_finite()
            && self.hi.is_finite()
            && self.lo <= self.hi
            && self.lo >= domain.0
            && self.hi <= domain.1
    }
}

impl std::str::FromStr for Interval {
    type Err = Error;

    /// Parses `a:b` or a single value `a`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad interval bound {t:?} in {s:?}")))
        };
        match s.split_once(':') {
            Some((a, b)) => Ok(Self::new(parse(a)?, parse(b)?)),
            None => Ok(Self::point(parse(s)?)),
        }
    }
}

/// Intervals the sampled parameters are drawn from, plus the generator seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub rho_range: Interval,
    pub b_range: Interval,
    pub sigma_range: Interval,
    pub w_range: Interval,
    pub seed: u64,
}

impl DegradationRanges {
    pub fn new(
        rho_range: Interval,
        b_range: Interval,
        sigma_range: Interval,
        w_range: Interval,
        seed: u64,
    ) -> Result<Self> {
        let r = Self { rho_range, b_range, sigma_range, w_range, seed };
        r.validate()?;
        Ok(r)
    }

    /// The full training distribution: every jittered bracket around
    /// ρ ∈ [1,10], b ∈ [2,32], σ ∈ [0,10], w ∈ [50,100].
    pub fn full(seed: u64) -> Self {
        Self {
            rho_range: Interval::new(0.0, 11.0),
            b_range: Interval::new(1.0, 33.0),
            sigma_range: Interval::new(0.0, 11.0),
            w_range: Interval::new(45.0, 100.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rho", self.rho_range, RHO_DOMAIN),
            ("b", self.b_range, B_DOMAIN),
            ("sigma", self.sigma_range, SIGMA_DOMAIN),
            ("w", self.w_range, W_DOMAIN),
        ];
        for (name, iv, dom) in checks {
            if !iv.within(dom) {
                return Err(Error::Config(format!(
                    "{name} range [{}, {}] must be nonempty and inside [{}, {}]",
                    iv.lo, iv.hi, dom.0, dom.1
                )));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// One draw from `ranges` using a generator seeded by `ranges.seed`.
pub fn sample_degradation_params(ranges: &DegradationRanges) -> DegradationParams {
    sample_params_with(ranges, &mut ranges.rng())
}

pub fn sample_params_with(ranges: &DegradationRanges, rng: &mut impl Rng) -> DegradationParams {
    let blur_sigma = ranges.rho_range.sample(rng).max(MIN_BLUR_SIGMA);
    let down_factor = ranges.b_range.sample(rng).max(1.0);
    let noise_sigma = ranges.sigma_range.sample(rng).max(0.0);
    let jpeg_quality = ranges.w_range.sample(rng).round().clamp(1.0, 100.0) as u8;
    DegradationParams { blur_sigma, down_factor, noise_sigma, jpeg_quality }
}

/// Normalized 1-D Gaussian of side `2⌈3σ⌉ + 1`; the 2-D kernel is its outer product.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let sigma = sigma.max(MIN_BLUR_SIGMA);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index without edge repetition (`-1 → 1`), valid for any offset.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflective padding.
pub fn gaussian_blur(frame: ArrayView3<'_, f32>, sigma: f64) -> Array3<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (c, h, w) = frame.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - r, w);
                    acc += kv * frame[[ch, y, xx]] as f64;
                }
                tmp[[ch, y, x]] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (j, kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + j as i64 - r, h);
                    acc += kv * tmp[[ch, yy, x]] as f64;
                }
                out[[ch, y, x]] = acc as f32;
            }
        }
    }
    out
}

/// Bicubic (Catmull-Rom) resize of every channel.
pub fn resize_bicubic(frame: ArrayView3<'_, f32>, new_h: usize, new_w: usize) -> Array3<f32> {
    let (c, h, w) = frame.dim();
    if (new_h, new_w) == (h, w) {
        return frame.to_owned();
    }
    let mut out = Array3::<f32>::zeros((c, new_h, new_w));
    for ch in 0..c {
        let plane = ImageBuffer::<Luma<f32>, Vec<f32>>::from_fn(w as u32, h as u32, |x, y| {
            Luma([frame[[ch, y as usize, x as usize]]])
        });
        let resized = imageops::resize(&plane, new_w as u32, new_h as u32, FilterType::CatmullRom);
        for (x, y, p) in resized.enumerate_pixels() {
            out[[ch, y as usize, x as usize]] = p.0[0];
        }
    }
    out
}

/// 8-bit baseline JPEG encode/decode; gray frames go through as replicated RGB.
pub fn jpeg_roundtrip(frame: ArrayView3<'_, f32>, quality: u8) -> Result<Array3<f32>> {
    let (c, h, w) = frame.dim();
    let rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if c == 1 {
            let v = to_u8(frame[[0, y, x]]);
            Rgb([v, v, v])
        } else {
            Rgb([to_u8(frame[[0, y, x]]), to_u8(frame[[1, y, x]]), to_u8(frame[[2, y, x]])])
        }
    });
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality.clamp(1, 100)).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?.to_rgb8();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for (x, y, p) in decoded.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if c == 1 {
            let mean = (p.0[0] as f32 + p.0[1] as f32 + p.0[2] as f32) / 3.0;
            out[[0, y, x]] = mean / 255.0;
        } else {
            for ch in 0..3 {
                out[[ch, y, x]] = p.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Applies blur → bicubic down by `b′` → bicubic up to the input size →
/// noise of std `σ′/255` → JPEG at `w′` → clamp.
pub fn degrade_frame(
    frame: ArrayView3<'_, f32>,
    params: &DegradationParams,
    rng: &mut impl Rng,
) -> Result<Array3<f32>> {
    if let Some(v) = frame.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("frame value {v}")));
    }
    let (_, h, w) = frame.dim();
    let blurred = gaussian_blur(frame, params.blur_sigma);
    let dh = ((h as f64 / params.down_factor).round() as usize).max(1);
    let dw = ((w as f64 / params.down_factor).round() as usize).max(1);
    let small = resize_bicubic(blurred.view(), dh, dw);
    let mut up = resize_bicubic(small.view(), h, w);
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, params.noise_sigma / 255.0)
            .map_err(|e| Error::Config(e.to_string()))?;
        up.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }
    let mut out = jpeg_roundtrip(up.view(), params.jpeg_quality)?;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Degrades every frame of `clip`. With `per_clip_params` one draw is shared
/// by all frames and the returned vector has one element; otherwise it holds
/// one draw per frame.
pub fn degrade_clip(
    clip: &VideoClip,
    ranges: &DegradationRanges,
    per_clip_params: bool,
) -> Result<(VideoClip, Vec<DegradationParams>)> {
    degrade_clip_with(clip, ranges, per_clip_params, &mut ranges.rng())
}

pub fn degrade_clip_with(
    clip: &VideoClip,
    ranges: &DegradationRanges,
    per_clip_params: bool,
    rng: &mut impl Rng,
) -> Result<(VideoClip, Vec<DegradationParams>)> {
    let mut params = Vec::new();
    if per_clip_params {
        params.push(sample_params_with(ranges, rng));
    }
    let mut frames = Vec::with_capacity(clip.num_frames());
    for t in 0..clip.num_frames() {
        let p = if per_clip_params {
            params[0]
        } else {
            let p = sample_params_with(ranges, rng);
            params.push(p);
            p
        };
        frames.push(degrade_frame(clip.frame(t), &p, rng)?);
    }
    let mut out = VideoClip::from_frames(&frames)?;
    out.frame_rate = clip.frame_rate;
    Ok((out, params))
}

/// Applies fixed parameters to every frame with noise drawn from `noise_seed`.
pub fn degrade_clip_fixed(
    clip: &VideoClip,
    params: &DegradationParams,
    noise_seed: u64,
) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let frames = (0..clip.num_frames())
        .map(|t| degrade_frame(clip.frame(t), params, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames)
}

/// One row of the degradation manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub hq_dir: String,
    pub lq_dir: String,
    pub seed: u64,
    pub rho: f64,
    pub b: f64,
    pub sigma: f64,
    pub w: u8,
}

pub fn write_manifest_csv(path: &std::path::Path, rows: &[ManifestRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

pub fn read_manifest_csv(path: &std::path::Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn smooth_frame(c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            0.5 + 0.3 * ((x as f32 * 0.15 + ch as f32).sin() * (y as f32 * 0.1).cos())
        })
    }

    fn max_abs_diff(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn degenerate_interval_is_exact() {
        let r = DegradationRanges::new(
            Interval::point(2.0),
            Interval::new(2.0, 4.0),
            Interval::new(0.0, 10.0),
            Interval::new(50.0, 100.0),
            7,
        )
        .unwrap();
        assert_eq!(sample_degradation_params(&r).blur_sigma, 2.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let r = DegradationRanges::full(42);
        assert_eq!(sample_degradation_params(&r), sample_degradation_params(&r));
        assert_ne!(sample_degradation_params(&r), sample_degradation_params(&r.with_seed(43)));
    }

    #[test]
    fn noise_draws_respect_bounds() {
        // σ ∈ [0, 10] jittered by ±1 gives σ′ ∈ [0, 11]; brute-force the draws.
        let r = DegradationRanges::full(3);
        let mut rng = r.rng();
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_params_with(&r, &mut rng).noise_sigma)
            .collect();
        let min = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 0.0 && max <= 11.0, "min {min} max {max}");
        let all = (0..10_000).map(|_| sample_params_with(&r, &mut rng));
        for p in all {
            assert!(p.blur_sigma > 0.0 && p.down_factor >= 1.0);
            assert!((1..=100).contains(&p.jpeg_quality));
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let bad = DegradationRanges::new(
            Interval::new(3.0, 2.0),
            Interval::new(2.0, 4.0),
            Interval::new(0.0, 10.0),
            Interval::new(50.0, 100.0),
            0,
        );
        assert!(bad.is_err());
        let bad = DegradationRanges::new(
            Interval::new(1.0, 2.0),
            Interval::new(0.5, 4.0),
            Interval::new(0.0, 10.0),
            Interval::new(50.0, 100.0),
            0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn interval_parsing() {
        assert_eq!("1:3".parse::<Interval>().unwrap(), Interval::new(1.0, 3.0));
        assert_eq!("2.5".parse::<Interval>().unwrap(), Interval::point(2.5));
        assert!("a:3".parse::<Interval>().is_err());
    }

    #[test]
    fn kernel_is_normalized_and_sized() {
        for sigma in [MIN_BLUR_SIGMA, 0.5, 1.0, 2.3, 7.0, 11.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            let sum2d: f64 = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).sum();
            assert!((sum2d - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(0, 1), 0);
    }

    #[test]
    fn near_identity_config_only_costs_jpeg_error() {
        let frame = smooth_frame(3, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = degrade_frame(frame.view(), &DegradationParams::near_identity(), &mut rng).unwrap();
        assert_eq!(out.dim(), frame.dim());
        assert!(max_abs_diff(&out, &frame) <= 0.02);
    }

    #[test]
    fn constant_frame_survives_blur() {
        let frame = Array3::from_elem((3, 24, 24), 0.5f32);
        for rho in [0.5, 3.0, 9.0] {
            let p = DegradationParams { blur_sigma: rho, down_factor: 1.0, noise_sigma: 0.0, jpeg_quality: 90 };
            let out = degrade_frame(frame.view(), &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(max_abs_diff(&out, &frame) <= 0.02, "rho {rho}");
        }
    }

    #[test]
    fn gray_frames_keep_one_channel() {
        let frame = smooth_frame(1, 16, 16);
        let p = DegradationParams { blur_sigma: 1.0, down_factor: 2.0, noise_sigma: 3.0, jpeg_quality: 70 };
        let out = degrade_frame(frame.view(), &p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.dim(), (1, 16, 16));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut frame = smooth_frame(3, 8, 8);
        frame[[0, 0, 0]] = f32::NAN;
        let r = degrade_frame(frame.view(), &DegradationParams::near_identity(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn per_clip_parameters_are_shared() {
        let frames = Array4::from_shape_fn((8, 3, 16, 16), |(f, c, y, x)| {
            ((f + c + y + x) % 7) as f32 / 7.0
        });
        let clip = VideoClip::new(frames).unwrap();
        let r = DegradationRanges::full(5);
        let (out, params) = degrade_clip(&clip, &r, true).unwrap();
        assert_eq!(out.dims(), clip.dims());
        assert_eq!(params.len(), 1);
        let (out2, _) = degrade_clip(&clip, &r, true).unwrap();
        assert_eq!(out, out2);
        let (_, per_frame) = degrade_clip(&clip, &r, false).unwrap();
        assert_eq!(per_frame.len(), 8);
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("manifest.csv");
        let rows = vec![ManifestRow {
            clip_id: "clip_000".into(),
            hq_dir: "hq/clip_000".into(),
            lq_dir: "lq/clip_000".into(),
            seed: 9,
            rho: 1.5,
            b: 3.25,
            sigma: 4.0,
            w: 77,
        }];
        write_manifest_csv(&path, &rows).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("clip_id,hq_dir,lq_dir,seed,rho,b,sigma,w"));
        assert_eq!(read_manifest_csv(&path).unwrap(), rows);
    }

    fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn noise_std_matches_sigma() {
        let gray = Array3::from_elem((3, 48, 48), 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sigma in [5.0, 10.0] {
            let p = DegradationParams { noise_sigma: sigma, ..DegradationParams::near_identity() };
            let err: f64 = (0..10).map(|_| mse(&degrade_frame(gray.view(), &p, &mut rng).unwrap(), &gray)).sum::<f64>() / 10.0;
            let std = err.sqrt();
            let want = sigma / 255.0;
            // JPEG at quality 100 smooths a little and adds a little
            assert!((std - want).abs() < 0.25 * want, "sigma {sigma}: std {std} want {want}");
        }
    }

    #[test]
    fn error_grows_with_noise() {
        let frame = smooth_frame(3, 48, 48);
        let err = |sigma: f64| {
            let p = DegradationParams { noise_sigma: sigma, ..DegradationParams::near_identity() };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..4).map(|_| mse(&degrade_frame(frame.view(), &p, &mut rng).unwrap(), &frame)).sum::<f64>()
        };
        let errs: Vec<f64> = [0.0, 2.0, 5.0, 10.0, 20.0].into_iter().map(err).collect();
        assert!(errs.windows(2).all(|w| w[0] < w[1]), "{errs:?}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn output_keeps_shape_and_range(
            blur in 0.1f64..11.0,
            down in 1.0f64..33.0,
            noise in 0.0f64..11.0,
            q in 1u8..=100,
            side in 8usize..40,
            seed in 0u64..1000,
        ) {
            let frame = smooth_frame(3, side, side + 3);
            let p = DegradationParams { blur_sigma: blur, down_factor: down, noise_sigma: noise, jpeg_quality: q };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = degrade_frame(frame.view(), &p, &mut rng).unwrap();
            proptest::prop_assert_eq!(out.dim(), frame.dim());
            proptest::prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
