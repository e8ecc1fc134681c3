//! Dense rank-4/rank-5 arrays in batch-major NCHW order, plus the small
//! matrix type used for channel-mixing weights and pooled features.
//!
//! Memory order is batch, then channel, then row, then column, so per-channel
//! row loops run over contiguous memory. Tensors are plain owned buffers; no
//! operation mutates its inputs and filled tensors can be shared across
//! threads freely.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Element type of every tensor: IEEE single or double precision.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Rank-4 array indexed (batch, channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(&[batch, channels, height, width])?;
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        })
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        check_dims(&[batch, channels, height, width])?;
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(Error::shape("Tensor4::from_vec", expected, data.len()));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn plane_offset(&self, n: usize, c: usize) -> usize {
        (n * self.channels + c) * self.plane_len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.plane_offset(n, c) + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let off = self.plane_offset(n, c) + y * self.width + x;
        self.data[off] = v;
    }

    /// Contiguous (height * width) slice for one (batch, channel) plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let off = self.plane_offset(n, c);
        &self.data[off..off + self.plane_len()]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let off = self.plane_offset(n, c);
        let len = self.plane_len();
        &mut self.data[off..off + len]
    }

    /// Contiguous row of one channel plane.
    #[inline]
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[T] {
        let off = self.plane_offset(n, c) + y * self.width;
        &self.data[off..off + self.width]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Tensor4::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// New tensor keeping the first `count` channels.
    pub fn take_channels(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.channels {
            return Err(Error::invalid(format!(
                "take_channels: {count} of {}",
                self.channels
            )));
        }
        let mut out = Self::zeros(self.batch, count, self.height, self.width)?;
        for n in 0..self.batch {
            for c in 0..count {
                out.plane_mut(n, c).copy_from_slice(self.plane(n, c));
            }
        }
        Ok(out)
    }

    /// Keeps every `stride`-th pixel in both spatial dimensions, starting at 0.
    pub fn sample_stride(&self, stride: usize) -> Result<Self> {
        if stride == 1 {
            return Ok(self.clone());
        }
        let oh = div_ceil(self.height, stride);
        let ow = div_ceil(self.width, stride);
        let mut out = Self::zeros(self.batch, self.channels, oh, ow)?;
        for n in 0..self.batch {
            for c in 0..self.channels {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for r in 0..oh {
                    for q in 0..ow {
                        dst[r * ow + q] = src[r * stride * self.width + q * stride];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rank-5 array indexed (batch, channel, depth, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    batch: usize,
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(
        batch: usize,
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        check_dims(&[batch, channels, depth, height, width])?;
        Ok(Self {
            batch,
            channels,
            depth,
            height,
            width,
            data: vec![T::zero(); batch * channels * depth * height * width],
        })
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        check_dims(&[batch, channels, depth, height, width])?;
        let expected = batch * channels * depth * height * width;
        if data.len() != expected {
            return Err(Error::shape("Tensor5::from_vec", expected, data.len()));
        }
        Ok(Self {
            batch,
            channels,
            depth,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        (self.batch, self.channels, self.depth, self.height, self.width)
    }

    #[inline]
    pub fn volume_len(&self) -> usize {
        self.depth * self.height * self.width
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize, v: T) {
        let off = self.offset(n, c, z, y, x);
        self.data[off] = v;
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        (((n * self.channels + c) * self.depth + z) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Row-major 2D matrix; used for 1x1 mixing weights, stencil tables,
/// pooled features and classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Mat::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("Mat::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    /// Identity-like matrix: ones on the main diagonal, zero elsewhere.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.set(i, i, T::one());
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "all tensor dimensions must be >= 1, got {dims:?}"
        )));
    }
    Ok(())
}

#[inline]
pub fn div_ceil(n: usize, d: usize) -> usize {
    (n + d - 1) / d
}

/// Zero-pads the spatial dimensions by `pad` on every side.
pub fn pad2d<T: Scalar>(x: &Tensor4<T>, pad: usize) -> Tensor4<T> {
    if pad == 0 {
        return x.clone();
    }
    let (b, c, h, w) = x.shape();
    let mut out = Tensor4::zeros(b, c, h + 2 * pad, w + 2 * pad).expect("padded dims are nonzero");
    let ow = w + 2 * pad;
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for y in 0..h {
                let doff = (y + pad) * ow + pad;
                dst[doff..doff + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

/// Removes `pad` pixels from every spatial side; inverse of [`pad2d`].
pub fn crop2d<T: Scalar>(x: &Tensor4<T>, pad: usize) -> Result<Tensor4<T>> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.shape();
    if h <= 2 * pad || w <= 2 * pad {
        return Err(Error::invalid(format!(
            "crop2d: pad {pad} too large for {h}x{w} map"
        )));
    }
    let (nh, nw) = (h - 2 * pad, w - 2 * pad);
    let mut out = Tensor4::zeros(b, c, nh, nw)?;
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for y in 0..nh {
                let soff = (y + pad) * w + pad;
                dst[y * nw..(y + 1) * nw].copy_from_slice(&src[soff..soff + nw]);
            }
        }
    }
    Ok(out)
}

/// Largest elementwise absolute difference; zero iff the value sequences match.
pub fn max_abs_diff<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "max_abs_diff",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(max_abs_diff_slices(a.data(), b.data()))
}

pub fn max_abs_diff_slices<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

/// Fill distribution for [`seeded_fill`] and weight initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FillDistribution {
    /// Uniform on (-bound, bound).
    Uniform { bound: f64 },
    /// Normal with mean zero and the given standard deviation.
    Normal { sigma: f64 },
}

impl FillDistribution {
    fn validate(self) -> Result<()> {
        let ok = match self {
            FillDistribution::Uniform { bound } => bound > 0.0,
            FillDistribution::Normal { sigma } => sigma > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("fill scale must be positive: {self:?}")))
        }
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills a slice from an already-seeded stream. Draws are made in f64 so the
/// same seed yields the same values (up to rounding) at either precision.
pub fn fill_slice<T: Scalar>(rng: &mut ChaCha8Rng, dist: FillDistribution, out: &mut [T]) {
    match dist {
        FillDistribution::Uniform { bound } => {
            for v in out {
                *v = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
        FillDistribution::Normal { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
            for v in out {
                *v = T::from_f64(normal.sample(rng));
            }
        }
    }
}

/// Deterministic random tensor: a pure function of (shape, seed, distribution).
pub fn seeded_fill<T: Scalar>(
    shape: (usize, usize, usize, usize),
    seed: u64,
    dist: FillDistribution,
) -> Result<Tensor4<T>> {
    dist.validate()?;
    let mut t = Tensor4::zeros(shape.0, shape.1, shape.2, shape.3)?;
    let mut rng = rng_from_seed(seed);
    fill_slice(&mut rng, dist, t.data_mut());
    Ok(t)
}

pub fn seeded_fill5<T: Scalar>(
    shape: (usize, usize, usize, usize, usize),
    seed: u64,
    dist: FillDistribution,
) -> Result<Tensor5<T>> {
    dist.validate()?;
    let mut t = Tensor5::zeros(shape.0, shape.1, shape.2, shape.3, shape.4)?;
    let mut rng = rng_from_seed(seed);
    fill_slice(&mut rng, dist, t.data_mut());
    Ok(t)
}

pub fn seeded_mat<T: Scalar>(rows: usize, cols: usize, seed: u64, dist: FillDistribution) -> Mat<T> {
    let mut m = Mat::zeros(rows, cols);
    let mut rng = rng_from_seed(seed);
    fill_slice(&mut rng, dist, m.data_mut());
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pad_ones_center() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0f64; 4]).unwrap();
        let p = pad2d(&x, 1);
        assert_eq!(p.shape(), (1, 1, 4, 4));
        let mut expected = vec![0.0; 16];
        for y in 1..3 {
            for c in 1..3 {
                expected[y * 4 + c] = 1.0;
            }
        }
        assert_eq!(p.data(), &expected[..]);
    }

    #[test]
    fn pad_zero_is_identity() {
        let x = seeded_fill::<f64>((2, 3, 4, 5), 7, FillDistribution::Uniform { bound: 1.0 }).unwrap();
        assert_eq!(pad2d(&x, 0), x);
    }

    #[test]
    fn pad_row_example() {
        // 1x3 row [1,2,3], pad 1: middle row of the 3x5 result is [0,1,2,3,0].
        let x = Tensor4::from_vec(1, 1, 1, 3, vec![1.0f64, 2.0, 3.0]).unwrap();
        let p = pad2d(&x, 1);
        assert_eq!(p.shape(), (1, 1, 3, 5));
        assert_eq!(p.row(0, 0, 0), &[0.0; 5]);
        assert_eq!(p.row(0, 0, 1), &[0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(p.row(0, 0, 2), &[0.0; 5]);
    }

    #[test]
    fn max_abs_diff_basics() {
        let a = seeded_fill::<f64>((1, 2, 3, 3), 1, FillDistribution::Normal { sigma: 1.0 }).unwrap();
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);

        let zeros = Tensor4::<f64>::zeros(1, 1, 2, 2).unwrap();
        let half = zeros.map(|_| 0.5);
        assert_eq!(max_abs_diff(&zeros, &half).unwrap(), 0.5);

        let b = seeded_fill::<f64>((1, 2, 3, 3), 2, FillDistribution::Normal { sigma: 1.0 }).unwrap();
        // Scalar-loop oracle.
        let mut expected = 0.0f64;
        for i in 0..a.len() {
            expected = expected.max((a.data()[i] - b.data()[i]).abs());
        }
        assert_eq!(max_abs_diff(&a, &b).unwrap(), expected);
    }

    #[test]
    fn max_abs_diff_shape_mismatch() {
        let a = Tensor4::<f32>::zeros(1, 1, 2, 2).unwrap();
        let b = Tensor4::<f32>::zeros(1, 1, 2, 3).unwrap();
        assert!(max_abs_diff(&a, &b).is_err());
    }

    #[test]
    fn seeded_fill_deterministic() {
        let shape = (2, 3, 5, 5);
        let a = seeded_fill::<f32>(shape, 42, FillDistribution::Uniform { bound: 1.0 }).unwrap();
        let b = seeded_fill::<f32>(shape, 42, FillDistribution::Uniform { bound: 1.0 }).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);

        let c = seeded_fill::<f32>(shape, 43, FillDistribution::Uniform { bound: 1.0 }).unwrap();
        assert!(max_abs_diff(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn seeded_fill_uniform_mean() {
        // 10^6 uniform(-1,1) samples: empirical mean within 0.01 of zero.
        let t = seeded_fill::<f64>((1, 1, 1000, 1000), 9, FillDistribution::Uniform { bound: 1.0 })
            .unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor4::<f32>::zeros(0, 1, 1, 1).is_err());
        assert!(Tensor5::<f32>::zeros(1, 1, 0, 1, 1).is_err());
    }

    #[test]
    fn sample_stride_even_positions() {
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let s = x.sample_stride(2).unwrap();
        assert_eq!(s.shape(), (1, 1, 2, 2));
        assert_eq!(s.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    proptest! {
        #[test]
        fn pad_then_crop_is_identity(
            b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6,
            pad in 0usize..3, seed in 0u64..1000,
        ) {
            let x = seeded_fill::<f64>((b, c, h, w), seed, FillDistribution::Normal { sigma: 1.0 }).unwrap();
            let back = crop2d(&pad2d(&x, pad), pad).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn max_abs_diff_symmetric_triangle(seed in 0u64..1000) {
            let shape = (1, 2, 3, 4);
            let a = seeded_fill::<f64>(shape, seed, FillDistribution::Normal { sigma: 1.0 }).unwrap();
            let b = seeded_fill::<f64>(shape, seed + 1, FillDistribution::Normal { sigma: 1.0 }).unwrap();
            let c = seeded_fill::<f64>(shape, seed + 2, FillDistribution::Normal { sigma: 1.0 }).unwrap();
            let ab = max_abs_diff(&a, &b).unwrap();
            let ba = max_abs_diff(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let ac = max_abs_diff(&a, &c).unwrap();
            let cb = max_abs_diff(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-15);
        }

        #[test]
        fn seeded_fill_is_pure(seed in 0u64..500) {
            let a = seeded_fill::<f32>((1, 1, 4, 4), seed, FillDistribution::Normal { sigma: 0.5 }).unwrap();
            let b = seeded_fill::<f32>((1, 1, 4, 4), seed, FillDistribution::Normal { sigma: 0.5 }).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
