//! Latent token grids, index grids and the vision bank, with the exact
//! nearest-entry search shared by vector quantization and bank lookup.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// `f×c×h×w` latent block; `downscale` relates it to pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: Array4<f32>,
    pub downscale: usize,
}

impl FeatureGrid {
    pub fn new(values: Array4<f32>, downscale: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v}")));
        }
        Ok(Self { values, downscale })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    /// Channel vector of the token at `(f, y, x)`.
    pub fn token(&self, f: usize, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels()).map(|c| self.values[[f, c, y, x]]).collect()
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.values.iter().copied().collect();
        Ok(Tensor::from_vec(data, self.values.dim(), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, downscale: usize) -> Result<Self> {
        let dims = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let values = Array4::from_shape_vec(dims, data).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values, downscale)
    }
}

/// Bank indices per token, `f×h×w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub codes: Array3<usize>,
    pub downscale: usize,
}

impl IndexGrid {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.codes.dim()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let data: Vec<u32> = self.codes.iter().map(|&c| c as u32).collect();
        Ok(Tensor::from_vec(data, self.codes.dim(), device)?)
    }

    /// Fraction of positions where both grids agree.
    pub fn agreement(&self, other: &IndexGrid) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let same = self.codes.iter().zip(other.codes.iter()).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.codes.len() as f64)
    }
}

/// `N×d` codebook of latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionBank {
    pub entries: Array2<f32>,
}

impl VisionBank {
    pub fn new(entries: Array2<f32>) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::EmptyBank);
        }
        if entries.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN bank entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, d) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(Array2::from_shape_vec((n, d), data).map_err(|e| Error::Shape(e.to_string()))?)
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.entries.iter().copied().collect();
        Ok(Tensor::from_vec(data, self.entries.dim(), device)?.to_dtype(dtype)?)
    }

    fn flat(&self) -> &[f32] {
        self.entries.as_slice().expect("bank entries are contiguous")
    }
}

/// Index and squared distance of the bank row nearest to `token`; ties go to
/// the lowest index.
pub fn nearest_entry(entries: &[f32], dim: usize, token: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, row) in entries.chunks_exact(dim).enumerate() {
        let d: f64 = row
            .iter()
            .zip(token)
            .map(|(a, b)| {
                let diff = *a as f64 - *b as f64;
                diff * diff
            })
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest-entry codes for `n` tokens stored row-major in `tokens` (`n×dim`).
pub fn nearest_codes(bank: &VisionBank, tokens: &[f32]) -> Vec<usize> {
    let d = bank.dim();
    tokens
        .chunks_exact(d)
        .map(|t| nearest_entry(bank.flat(), d, t).0)
        .collect()
}

/// Replaces every token by its nearest bank entry.
pub fn quantize(z: &FeatureGrid, bank: &VisionBank) -> Result<(IndexGrid, FeatureGrid)> {
    if bank.size() == 0 {
        return Err(Error::EmptyBank);
    }
    let (f, c, h, w) = z.dims();
    if bank.dim() != c {
        return Err(Error::Shape(format!("bank width {} vs {c} latent channels", bank.dim())));
    }
    let mut codes = Array3::<usize>::zeros((f, h, w));
    let mut token = vec![0f32; c];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                for (ci, t) in token.iter_mut().enumerate() {
                    *t = z.values[[fi, ci, y, x]];
                }
                codes[[fi, y, x]] = nearest_entry(bank.flat(), c, &token).0;
            }
        }
    }
    let codes = IndexGrid { codes, downscale: z.downscale };
    let quantized = lookup(bank, &codes)?;
    Ok((codes, quantized))
}

/// Copies bank row `codes[f, y, x]` into every token position.
pub fn lookup(bank: &VisionBank, codes: &IndexGrid) -> Result<FeatureGrid> {
    let (f, h, w) = codes.dims();
    let c = bank.dim();
    let mut values = Array4::<f32>::zeros((f, c, h, w));
    for ((fi, y, x), &code) in codes.codes.indexed_iter() {
        if code >= bank.size() {
            return Err(Error::CodeOutOfRange { code, size: bank.size() });
        }
        for ci in 0..c {
            values[[fi, ci, y, x]] = bank.entries[[code, ci]];
        }
    }
    Ok(FeatureGrid { values, downscale: codes.downscale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn bank2() -> VisionBank {
        VisionBank::new(array![[0.0, 0.0], [2.0, 2.0]]).unwrap()
    }

    fn grid_from_tokens(tokens: &[[f32; 2]]) -> FeatureGrid {
        let mut v = Array4::<f32>::zeros((1, 2, 1, tokens.len()));
        for (i, t) in tokens.iter().enumerate() {
            v[[0, 0, 0, i]] = t[0];
            v[[0, 1, 0, i]] = t[1];
        }
        FeatureGrid::new(v, 1).unwrap()
    }

    #[test]
    fn nearest_and_ties() {
        let (codes, q) = quantize(&grid_from_tokens(&[[1.9, 2.1], [1.0, 1.0]]), &bank2()).unwrap();
        assert_eq!(codes.codes[[0, 0, 0]], 1);
        assert_eq!(codes.codes[[0, 0, 1]], 0, "equidistant token resolves to the lowest index");
        assert_eq!(q.token(0, 0, 0), vec![2.0, 2.0]);
    }

    #[test]
    fn lookup_constant_and_bounds() {
        let bank = bank2();
        let codes = IndexGrid { codes: Array3::zeros((2, 3, 3)), downscale: 8 };
        let g = lookup(&bank, &codes).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        let mut bad = codes.clone();
        bad.codes[[1, 1, 1]] = 2;
        assert!(matches!(lookup(&bank, &bad), Err(Error::CodeOutOfRange { code: 2, size: 2 })));
    }

    #[test]
    fn empty_bank_and_width_mismatch() {
        assert!(matches!(VisionBank::new(Array2::zeros((0, 2))), Err(Error::EmptyBank)));
        let bank = VisionBank::new(Array2::zeros((3, 4))).unwrap();
        assert!(quantize(&grid_from_tokens(&[[0.0, 0.0]]), &bank).is_err());
    }

    fn arb_grid_and_bank() -> impl Strategy<Value = (FeatureGrid, VisionBank)> {
        (1usize..4, 1usize..5, 1usize..4, 1usize..4, 1usize..12).prop_flat_map(|(f, c, h, w, n)| {
            (
                proptest::collection::vec(-3.0f32..3.0, f * c * h * w),
                proptest::collection::vec(-3.0f32..3.0, n * c),
            )
                .prop_map(move |(z, b)| {
                    (
                        FeatureGrid::new(Array4::from_shape_vec((f, c, h, w), z).unwrap(), 1).unwrap(),
                        VisionBank::new(Array2::from_shape_vec((n, c), b).unwrap()).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn requantizing_a_lookup_is_idempotent((z, bank) in arb_grid_and_bank()) {
            let (codes, q) = quantize(&z, &bank).unwrap();
            prop_assert_eq!(&lookup(&bank, &codes).unwrap(), &q);
            let (again, _) = quantize(&q, &bank).unwrap();
            // duplicate rows map to the lowest index holding that value
            for ((a, b), _) in again.codes.iter().zip(codes.codes.iter()).zip(0..) {
                prop_assert_eq!(bank.entries.row(*a), bank.entries.row(*b));
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn superset_bank_never_increases_error((z, bank) in arb_grid_and_bank(), extra in proptest::collection::vec(-3.0f32..3.0, 0..12)) {
            let c = bank.dim();
            let extra_rows = extra.len() / c;
            let mut rows: Vec<f32> = bank.entries.iter().copied().collect();
            rows.extend_from_slice(&extra[..extra_rows * c]);
            let bigger = VisionBank::new(Array2::from_shape_vec((bank.size() + extra_rows, c), rows).unwrap()).unwrap();
            let err = |b: &VisionBank| {
                let (_, q) = quantize(&z, b).unwrap();
                (&q.values - &z.values).mapv(|v| (v as f64).powi(2)).sum()
            };
            prop_assert!(err(&bigger) <= err(&bank) + 1e-9);
        }
    }
}
