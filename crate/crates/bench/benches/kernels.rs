use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dptempcoh::degrade::degrade_frame;
use dptempcoh::motion::{modulate_with_bank, ModulationVariant};
use dptempcoh::nn::{conv, ParamStore};
use dptempcoh::predictor::TokenGeometry;
use dptempcoh::{quantize, Config, DegradationParams, MotionStatsBank, Predictor, PredictorMode};
use dptempcoh_bench::{bank, frame, grid, rng};
use ndarray::Array2;
use rand::Rng;

fn bench_quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize");
    for n in [256, 1024] {
        let z = grid(8, 32, 8, 1);
        let b = bank(n, 32, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| quantize(&z, &b).unwrap()));
    }
    g.finish();
}

fn bench_degrade(c: &mut Criterion) {
    let params = DegradationParams { blur_sigma: 2.0, down_factor: 4.0, noise_sigma: 5.0, jpeg_quality: 70 };
    let mut g = c.benchmark_group("degrade_frame");
    for side in [64, 128] {
        let f = frame(side, 3);
        let mut r = rng(4);
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |bch, _| {
            bch.iter(|| degrade_frame(f.view(), &params, &mut r).unwrap())
        });
    }
    g.finish();
}

fn bench_predictor(c: &mut Criterion) {
    let cfg = Config::toy();
    let dev = Device::Cpu;
    let geometry = TokenGeometry { frames: 8, height: 8, width: 8, channels: cfg.codec.latent_channels };
    let mut ps = ParamStore::new(0, DType::F32, &dev);
    let p = Predictor::new(&mut ps, cfg.predictor.clone(), geometry, cfg.codec.bank_size_vision).unwrap();
    let z = Tensor::randn(0f32, 1.0, (1, 8, cfg.codec.latent_channels, 8, 8), &dev).unwrap();
    let mut g = c.benchmark_group("predictor_forward");
    for mode in [PredictorMode::SpatialTemporal, PredictorMode::SpatialOnly] {
        g.bench_function(format!("{mode:?}"), |b| b.iter(|| p.forward_with_mode(&z, mode, false).unwrap()));
    }
    g.finish();
}

fn bench_modulate(c: &mut Criterion) {
    let z = grid(8, 32, 8, 5);
    let mut r = rng(6);
    let entries = Array2::from_shape_fn((64, 8 * 2), |(_, j)| if j < 8 { r.random_range(-0.5f32..0.5) } else { r.random_range(0.5f32..1.5) });
    let mb = MotionStatsBank::new(entries, 8).unwrap();
    c.bench_function("modulate_with_bank", |b| {
        b.iter(|| modulate_with_bank(&z, &mb, ModulationVariant::AdainCorrected, 1e-5).unwrap())
    });
}

fn bench_conv(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = Tensor::randn(0f32, 1.0, (8, 32, 16, 16), &dev).unwrap();
    let w = Tensor::randn(0f32, 1.0, (32, 32, 3, 3), &dev).unwrap();
    c.bench_function("conv3x3_32ch_16px", |b| b.iter(|| conv(&x, &w, 1, 1).unwrap()));
}

criterion_group!(benches, bench_quantize, bench_degrade, bench_predictor, bench_modulate, bench_conv);
criterion_main!(benches);
