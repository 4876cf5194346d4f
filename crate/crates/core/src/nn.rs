//! Seeded parameter storage and the small set of layers the networks share.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Named trainable tensors, initialized from a seeded generator so that a
/// config plus a seed reproduces the exact same network.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    vars: IndexMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            device: device.clone(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: IndexMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies current values, detached from the graph.
    pub fn snapshot(&self) -> Result<IndexMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every stored parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name} in checkpoint")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("source store lacks {name}")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn linear(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Linear> {
    Ok(Linear {
        w: ps.param(&format!("{name}.weight"), &[output, input], Init::FanIn(input))?,
        b: ps.param(&format!("{name}.bias"), &[output], Init::Zeros)?,
    })
}

/// Linear layer with all-zero weights; used as residual output projections.
pub fn linear_zero(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Linear> {
    Ok(Linear {
        w: ps.param(&format!("{name}.weight"), &[output, input], Init::Zeros)?,
        b: ps.param(&format!("{name}.bias"), &[output], Init::Zeros)?,
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Applies to the last dimension of a tensor of any rank ≥ 2.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        Ok(y.broadcast_add(&self.b)?)
    }
}

/// 2-D cross-correlation.
///
/// candle's CPU conv2d reads a contiguous NCHW input as NHWC when channels,
/// height and width are all equal (the stride patterns coincide), which
/// corrupts both the output and the input gradient. In that case the input
/// gets `stride` extra zero columns on the right and the extra output column
/// is dropped; every kept output reads the same values as before. (Padding by
/// exactly `stride` keeps candle's backward, which sizes the input gradient
/// from the height alone, consistent.)
pub fn conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    if c == h && c == wd {
        let ow = (wd + 2 * padding - w.dim(3)?) / stride + 1;
        let y = x.pad_with_zeros(3, 0, stride)?.conv2d(w, padding, stride, 1, 1)?;
        return Ok(y.narrow(3, 0, ow)?);
    }
    Ok(x.conv2d(w, padding, stride, 1, 1)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv2d(
    ps: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let fan_in = cin * kernel * kernel;
    Ok(Conv2d {
        w: ps.param(&format!("{name}.weight"), &[cout, cin, kernel, kernel], Init::FanIn(fan_in))?,
        b: ps.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
        stride,
        padding,
    })
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv(x, &self.w, self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.b.reshape((1, (), 1, 1))?)?)
    }
}

/// Transposed convolution doubling the spatial size (kernel 4, stride 2, padding 1).
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub w: Tensor,
    pub b: Tensor,
}

pub fn deconv2d(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Deconv2d> {
    Ok(Deconv2d {
        w: ps.param(&format!("{name}.weight"), &[cin, cout, 4, 4], Init::FanIn(cin * 4))?,
        b: ps.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
    })
}

impl Deconv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // The input gradient runs conv2d over the output, so keep the output
        // off the shape that trips `conv`'s caveat.
        let (_, _, h, w) = x.dims4()?;
        let cout = self.w.dim(1)?;
        let y = if cout == 2 * h && cout == 2 * w {
            let y = x.pad_with_zeros(3, 0, 1)?.conv_transpose2d(&self.w, 1, 0, 2, 1)?;
            y.narrow(3, 0, 2 * w)?
        } else {
            x.conv_transpose2d(&self.w, 1, 0, 2, 1)?
        };
        Ok(y.broadcast_add(&self.b.reshape((1, (), 1, 1))?)?)
    }
}

/// 3×3×3 spatio-temporal convolution over `B×F×C×H×W` input, zero-padded in
/// time and space. Evaluated as one 2-D convolution over the channel-stacked
/// frames `[t-1, t, t+1]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `cout × cin × 3 × 3 × 3`, temporal axis third.
    pub w: Tensor,
    pub b: Tensor,
}

pub fn conv3d(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Conv3d> {
    Ok(Conv3d {
        w: ps.param(&format!("{name}.weight"), &[cout, cin, 3, 3, 3], Init::FanIn(cin * 27))?,
        b: ps.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
    })
}

impl Conv3d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = x.dims5()?;
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let stacked = Tensor::cat(
            &[padded.narrow(1, 0, f)?, padded.narrow(1, 1, f)?, padded.narrow(1, 2, f)?],
            2,
        )?;
        let stacked = stacked.reshape((b * f, 3 * c, h, w))?;
        let (cout, cin, kt, kh, kw) = self.w.dims5()?;
        let kernel = self.w.permute((0, 2, 1, 3, 4))?.reshape((cout, kt * cin, kh, kw))?;
        let y = conv(&stacked, &kernel, 1, 1)?;
        let y = y.broadcast_add(&self.b.reshape((1, (), 1, 1))?)?;
        Ok(y.reshape((b, f, cout, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
}

pub fn layer_norm(ps: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        g: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
        b: ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
    })
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

/// Multi-head attention; queries from one sequence, keys and values from another.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub fn attention(
    ps: &mut ParamStore,
    name: &str,
    dim: usize,
    heads: usize,
    zero_output: bool,
) -> Result<Attention> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
    }
    Ok(Attention {
        q: linear(ps, &format!("{name}.q"), dim, dim)?,
        k: linear(ps, &format!("{name}.k"), dim, dim)?,
        v: linear(ps, &format!("{name}.v"), dim, dim)?,
        o: if zero_output {
            linear_zero(ps, &format!("{name}.o"), dim, dim)?
        } else {
            linear(ps, &format!("{name}.o"), dim, dim)?
        },
        heads,
    })
}

impl Attention {
    /// `xq`: `B×Tq×dim`, `xkv`: `B×Tk×dim`. Returns the output and, on
    /// request, the `B×heads×Tq×Tk` attention probabilities.
    pub fn forward(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        return_weights: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (b, tq, dim) = xq.dims3()?;
        let tk = xkv.dim(1)?;
        let hd = dim / self.heads;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(xq)?, tq)?;
        let k = split(self.k.forward(xkv)?, tk)?;
        let v = split(self.v.forward(xkv)?, tk)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let probs = softmax(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, dim))?;
        let out = self.o.forward(&out)?;
        Ok((out, return_weights.then_some(probs)))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub fn feed_forward(
    ps: &mut ParamStore,
    name: &str,
    dim: usize,
    hidden: usize,
    zero_output: bool,
) -> Result<FeedForward> {
    Ok(FeedForward {
        up: linear(ps, &format!("{name}.up"), dim, hidden)?,
        down: if zero_output {
            linear_zero(ps, &format!("{name}.down"), hidden, dim)?
        } else {
            linear(ps, &format!("{name}.down"), hidden, dim)?
        },
    })
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Adam (β1, β2, ε) without weight decay, with inspectable moment state.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        for i in 0..self.vars.len() {
            let Some(g) = grads.get(self.vars[i].as_tensor()) else {
                continue;
            };
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m * c1)? / ((&v * c2)?.sqrt()? + self.eps)?)?;
            let next = (self.vars[i].as_tensor() - (update * self.lr)?)?;
            self.vars[i].set(&next.detach())?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn load_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: usize) -> Result<()> {
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Shape("optimizer state length mismatch".into()));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales the gradients of `vars` so that their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, vars)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Scalar value of a 0-dim or single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    fn direct_conv(x: &[f64], w: &[f64], n: usize, c: usize, o: usize, hw: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (hw + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * o * oh * oh];
        for b in 0..n {
            for co in 0..o {
                for y in 0..oh {
                    for xx in 0..oh {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= hw as isize || ix >= hw as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ci) * hw + iy as usize) * hw + ix as usize]
                                        * w[((co * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * o + co) * oh + y) * oh + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dev = Device::Cpu;
        for &(n, c, o, hw, k, s, p) in
            &[(2, 4, 8, 4, 3, 1, 1), (2, 3, 5, 9, 4, 2, 1), (1, 2, 3, 8, 1, 1, 0), (1, 3, 2, 7, 3, 2, 0)]
        {
            let x = Tensor::randn(0f64, 1.0, (n, c, hw, hw), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let y = conv(&x, &w, s, p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let xa = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let wa = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(max_diff(&y, &direct_conv(&xa, &wa, n, c, o, hw, k, s, p)) < 1e-10);
        }
    }

    #[test]
    fn deconv_matches_scatter() {
        let dev = Device::Cpu;
        for &(cin, cout, h) in &[(3usize, 2usize, 3usize), (2, 6, 3)] {
            let mut ps = ParamStore::new(1, DType::F64, &dev);
            let d = deconv2d(&mut ps, "d", cin, cout).unwrap();
            let x = Tensor::randn(0f64, 1.0, (1, cin, h, h), &dev).unwrap();
            let y = d.forward(&x).unwrap();
            assert_eq!(y.dims(), &[1, cout, 2 * h, 2 * h]);
            let xa = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let wa = d.w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let mut want = vec![0.0; cout * 4 * h * h];
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..h {
                        for co in 0..cout {
                            for ky in 0..4 {
                                for kx in 0..4 {
                                    let oy = (iy * 2 + ky) as isize - 1;
                                    let ox = (ix * 2 + kx) as isize - 1;
                                    if oy < 0 || ox < 0 || oy >= 2 * h as isize || ox >= 2 * h as isize {
                                        continue;
                                    }
                                    want[(co * 2 * h + oy as usize) * 2 * h + ox as usize] +=
                                        xa[(ci * h + iy) * h + ix] * wa[((ci * cout + co) * 4 + ky) * 4 + kx];
                                }
                            }
                        }
                    }
                }
            }
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(max_diff(&got, &want) < 1e-10);
        }
    }

    fn assert_grads_match(x: &Var, w: &Var, loss: impl Fn(&Tensor, &Tensor) -> Tensor) {
        let dev = Device::Cpu;
        let grads = loss(x.as_tensor(), w.as_tensor()).backward().unwrap();
        for (v, is_x) in [(x, true), (w, false)] {
            let g = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in (0..base.len()).step_by(7) {
                let eval = |d: f64| {
                    let mut p = base.clone();
                    p[i] += d;
                    let t = Tensor::from_vec(p, v.as_tensor().dims(), &dev).unwrap();
                    let l = if is_x { loss(&t, w.as_tensor()) } else { loss(x.as_tensor(), &t) };
                    l.to_scalar::<f64>().unwrap()
                };
                let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                assert!((num - g[i]).abs() < 1e-5 * (1.0 + num.abs()), "{i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let var = |shape: (usize, usize, usize, usize)| Var::from_tensor(&Tensor::randn(0f64, 1.0, shape, &dev).unwrap()).unwrap();
        // channels == height == width is the shape candle mishandles
        for (xs, ws, stride, pad) in [((2, 4, 4, 4), (3, 4, 3, 3), 1, 1), ((2, 4, 4, 4), (3, 4, 4, 4), 2, 1), ((1, 3, 6, 6), (2, 3, 3, 3), 1, 0)] {
            let (x, w) = (var(xs), var(ws));
            assert_grads_match(&x, &w, |x, w| conv(x, w, stride, pad).unwrap().sqr().unwrap().sum_all().unwrap());
        }
        // deconv whose output has channels == height == width
        let (x, w) = (var((1, 2, 3, 3)), var((2, 6, 4, 4)));
        assert_grads_match(&x, &w, |x, w| {
            let d = Deconv2d { w: w.clone(), b: Tensor::zeros(6, DType::F64, &dev).unwrap() };
            d.forward(x).unwrap().sqr().unwrap().sum_all().unwrap()
        });
    }

    #[test]
    fn store_is_reproducible_per_seed() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(3, DType::F32, &dev);
        let mut b = ParamStore::new(3, DType::F32, &dev);
        let ta = a.param("w", &[4, 5], Init::FanIn(5)).unwrap();
        let tb = b.param("w", &[4, 5], Init::FanIn(5)).unwrap();
        let diff = (ta - tb).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(scalar(&diff).unwrap(), 0.0);
        assert!(a.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(0, DType::F64, &dev);
        let conv = conv3d(&mut ps, "c", 2, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 4, 2, 5, 5), &dev).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 4, 3, 5, 5]);
        // direct evaluation at one output site
        let xa: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let wa: Vec<f64> = conv.w.flatten_all().unwrap().to_vec1().unwrap();
        let at = |f: i64, c: usize, y: i64, xx: i64| -> f64 {
            if !(0..4).contains(&f) || !(0..5).contains(&y) || !(0..5).contains(&xx) {
                0.0
            } else {
                xa[(((f as usize) * 2 + c) * 5 + y as usize) * 5 + xx as usize]
            }
        };
        let (fo, co, yo, xo) = (0i64, 1usize, 2i64, 4i64);
        let mut acc = 0.0;
        for ci in 0..2 {
            for kt in 0..3i64 {
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let wv = wa[(((co * 2 + ci) * 3 + kt as usize) * 3 + ky as usize) * 3 + kx as usize];
                        acc += wv * at(fo + kt - 1, ci, yo + ky - 1, xo + kx - 1);
                    }
                }
            }
        }
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let idx = (((fo as usize) * 3 + co) * 5 + yo as usize) * 5 + xo as usize;
        assert!((got[idx] - acc).abs() < 1e-10);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, DType::F64, &dev);
        let att = attention(&mut ps, "a", 8, 2, false).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &dev).unwrap();
        let (_, w) = att.forward(&x, &x, true).unwrap();
        let sums = w.unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, DType::F64, &dev);
        let w = ps.param("w", &[3], Init::Ones).unwrap();
        let mut opt = Adam::new(ps.vars(), 0.1).unwrap();
        let loss = (&w * 2.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let after: Vec<f64> = ps.get("w").unwrap().to_vec1().unwrap();
        for v in after {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, DType::F64, &dev);
        let w = ps.param("w", &[4], Init::Ones).unwrap();
        let loss = (&w * 10.0).unwrap().sum_all().unwrap();
        let mut g = loss.backward().unwrap();
        let before = clip_grad_norm(&mut g, &ps.vars(), 1.0).unwrap();
        assert!((before - 20.0).abs() < 1e-9);
        assert!((grad_norm(&g, &ps.vars()).unwrap() - 1.0).abs() < 1e-9);
    }
}
