//! Convolution kernels.
//!
//! The lean operator mixes channels with a 1x1 convolution and adds a
//! per-channel 4-point stencil (top, left, right, bottom neighbors; the
//! center weight is the diagonal of the 1x1 matrix). Two implementations
//! compute it:
//!
//! * [`lean_conv2d_fused`] - one pass over the input; for each output tile
//!   the channel mix and the stencil taps are accumulated in the same sweep,
//!   so no intermediate tensor is written or re-read.
//! * [`lean_conv2d_reference`] - the literal two-pass decomposition
//!   (1x1 convolution, then depthwise stencil, then add, then stride
//!   sampling). This is the unfused baseline the benchmark times.
//!
//! A dense 3x3 kernel with full channel coupling serves as the baseline the
//! lean operator embeds into ([`lean_to_dense`]).
//!
//! All kernels use zero padding of 1, cross-correlation orientation, no bias,
//! and accumulate per output pixel in a fixed order (input channels ascending,
//! then stencil taps top/left/right/bottom), so the fused and reference paths
//! agree to a few ulps.

use rayon::prelude::*;

use crate::tensor::{div_ceil, Mat, Scalar, Tensor4};
use crate::{Error, Result};

/// Weights of the lean operator: a dense `c_out x c_in` channel-mixing matrix
/// plus one 4-entry stencil for each of the first `min(c_in, c_out)` channels.
///
/// Stencil column order: top, left, right, bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct LeanConvWeights<T> {
    pub alpha: Mat<T>,
    pub stencil: Mat<T>,
    pub stride: usize,
}

impl<T: Scalar> LeanConvWeights<T> {
    pub fn new(alpha: Mat<T>, stencil: Mat<T>, stride: usize) -> Result<Self> {
        check_stride(stride)?;
        let d = alpha.rows().min(alpha.cols());
        if stencil.rows() != d || stencil.cols() != 4 {
            return Err(Error::shape(
                "LeanConvWeights::new",
                format!("{d}x4 stencil"),
                format!("{}x{}", stencil.rows(), stencil.cols()),
            ));
        }
        if !alpha.is_finite() || !stencil.is_finite() {
            return Err(Error::invalid("lean weights must be finite"));
        }
        Ok(Self { alpha, stencil, stride })
    }

    pub fn zeros(c_out: usize, c_in: usize, stride: usize) -> Result<Self> {
        Self::new(Mat::zeros(c_out, c_in), Mat::zeros(c_out.min(c_in), 4), stride)
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.alpha.rows()
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.alpha.cols()
    }

    /// Number of channels carrying a stencil: `min(c_in, c_out)`.
    #[inline]
    pub fn diag_channels(&self) -> usize {
        self.stencil.rows()
    }

    /// `c_out * c_in + 4 * min(c_in, c_out)` trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.alpha.len() + self.stencil.len()
    }
}

/// Fully coupled convolution weights, kernel shape `(c_out, c_in, kH, kW)`
/// with odd kernel sides. The kernel tensor reuses [`Tensor4`] storage.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseConvWeights<T> {
    pub kernel: Tensor4<T>,
    pub stride: usize,
}

impl<T: Scalar> DenseConvWeights<T> {
    pub fn new(kernel: Tensor4<T>, stride: usize) -> Result<Self> {
        check_stride(stride)?;
        let (_, _, kh, kw) = kernel.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel sides must be odd, got {kh}x{kw}")));
        }
        if !kernel.data().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("dense kernel must be finite"));
        }
        Ok(Self { kernel, stride })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize) -> Result<Self> {
        Self::new(Tensor4::zeros(c_out, c_in, k, k)?, stride)
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.kernel.batch()
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.kernel.channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len()
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")))
    }
}

fn check_channels(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(context, format!("{expected} channels"), format!("{got} channels")))
    }
}

/// Output spatial size for a stride-`s` kernel sampling at 0, s, 2s, ...
#[inline]
pub fn strided_size(n: usize, stride: usize) -> usize {
    div_ceil(n, stride)
}

/// Accumulates the four stencil taps of one output row into `out_row`,
/// reading channel `ch` of image `n` at input row `ih` and stride `s`.
/// Tap order is fixed: top, left, right, bottom.
#[inline]
fn add_stencil_row<T: Scalar>(
    x: &Tensor4<T>,
    n: usize,
    ch: usize,
    ih: usize,
    s: usize,
    coeffs: &[T],
    out_row: &mut [T],
) {
    let h = x.height();
    let w = x.width();
    let ow = out_row.len();
    let (ct, cl, cr, cb) = (coeffs[0], coeffs[1], coeffs[2], coeffs[3]);

    if ih > 0 {
        let src = x.row(n, ch, ih - 1);
        if s == 1 {
            for (o, v) in out_row.iter_mut().zip(src) {
                *o += ct * *v;
            }
        } else {
            for (q, o) in out_row.iter_mut().enumerate() {
                *o += ct * src[q * s];
            }
        }
    }

    let mid = x.row(n, ch, ih);
    // Left neighbor exists whenever q*s >= 1.
    for q in 1..ow {
        out_row[q] += cl * mid[q * s - 1];
    }
    // Right neighbor exists whenever q*s + 1 < w.
    let right_end = if w >= 2 { (w - 2) / s + 1 } else { 0 };
    for q in 0..right_end.min(ow) {
        out_row[q] += cr * mid[q * s + 1];
    }

    if ih + 1 < h {
        let src = x.row(n, ch, ih + 1);
        if s == 1 {
            for (o, v) in out_row.iter_mut().zip(src) {
                *o += cb * *v;
            }
        } else {
            for (q, o) in out_row.iter_mut().enumerate() {
                *o += cb * src[q * s];
            }
        }
    }
}

/// Accumulates the 1x1 channel mix of one output row: for every input
/// channel, `out_row += alpha[o][i] * x_row(i)`. Ascending channel order.
#[inline]
fn add_mix_row<T: Scalar>(
    x: &Tensor4<T>,
    n: usize,
    alpha_row: &[T],
    ih: usize,
    s: usize,
    out_row: &mut [T],
) {
    for (i, &a) in alpha_row.iter().enumerate() {
        let src = x.row(n, i, ih);
        if s == 1 {
            for (o, v) in out_row.iter_mut().zip(src) {
                *o += a * *v;
            }
        } else {
            for (q, o) in out_row.iter_mut().enumerate() {
                *o += a * src[q * s];
            }
        }
    }
}

/// Fused lean convolution: one sweep over the input computes both the channel
/// mix and the stencil. Each input row is loaded once per output-channel tile;
/// no intermediate tensor exists.
pub fn lean_conv2d_fused<T: Scalar>(x: &Tensor4<T>, w: &LeanConvWeights<T>) -> Result<Tensor4<T>> {
    check_channels("lean_conv2d_fused", w.c_in(), x.channels())?;
    let (b, _, h, wd) = x.shape();
    let (c_out, d, s) = (w.c_out(), w.diag_channels(), w.stride);
    let (oh, ow) = (strided_size(h, s), strided_size(wd, s));
    let mut out = Tensor4::zeros(b, c_out, oh, ow)?;
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let n = idx / c_out;
            let o = idx % c_out;
            let alpha_row = w.alpha.row(o);
            for r in 0..oh {
                let ih = r * s;
                let out_row = &mut out_plane[r * ow..(r + 1) * ow];
                add_mix_row(x, n, alpha_row, ih, s, out_row);
                if o < d {
                    add_stencil_row(x, n, o, ih, s, w.stencil.row(o), out_row);
                }
            }
        });
    Ok(out)
}

/// Per-pixel channel mixing: `out_o(p) = sum_i alpha[o][i] * x_i(p)`.
pub fn conv1x1<T: Scalar>(x: &Tensor4<T>, alpha: &Mat<T>) -> Result<Tensor4<T>> {
    check_channels("conv1x1", alpha.cols(), x.channels())?;
    let (b, _, h, wd) = x.shape();
    let c_out = alpha.rows();
    let mut out = Tensor4::zeros(b, c_out, h, wd)?;
    let plane = h * wd;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let n = idx / c_out;
            let o = idx % c_out;
            let alpha_row = alpha.row(o);
            for r in 0..h {
                add_mix_row(x, n, alpha_row, r, 1, &mut out_plane[r * wd..(r + 1) * wd]);
            }
        });
    Ok(out)
}

/// Per-channel 4-point stencil with zero padding; no center term (the center
/// lives on the diagonal of the 1x1 matrix).
pub fn depthwise4<T: Scalar>(x: &Tensor4<T>, stencil: &Mat<T>) -> Result<Tensor4<T>> {
    check_channels("depthwise4", stencil.rows(), x.channels())?;
    if stencil.cols() != 4 {
        return Err(Error::shape("depthwise4", "4 stencil columns", stencil.cols()));
    }
    let (b, c, h, wd) = x.shape();
    let mut out = Tensor4::zeros(b, c, h, wd)?;
    let plane = h * wd;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let n = idx / c;
            let ch = idx % c;
            for r in 0..h {
                add_stencil_row(x, n, ch, r, 1, stencil.row(ch), &mut out_plane[r * wd..(r + 1) * wd]);
            }
        });
    Ok(out)
}

/// Unfused lean convolution: 1x1 mix, then depthwise stencil over the first
/// `min(c_in, c_out)` channels, elementwise add, then stride sampling.
/// Mathematically identical to [`lean_conv2d_fused`]; makes two full passes
/// over the input and materializes both intermediates.
pub fn lean_conv2d_reference<T: Scalar>(
    x: &Tensor4<T>,
    w: &LeanConvWeights<T>,
) -> Result<Tensor4<T>> {
    check_channels("lean_conv2d_reference", w.c_in(), x.channels())?;
    let d = w.diag_channels();
    let mut mixed = conv1x1(x, &w.alpha)?;
    let diag_in = x.take_channels(d)?;
    let stencil_out = depthwise4(&diag_in, &w.stencil)?;
    for n in 0..x.batch() {
        for ch in 0..d {
            let src = stencil_out.plane(n, ch);
            for (o, v) in mixed.plane_mut(n, ch).iter_mut().zip(src) {
                *o += *v;
            }
        }
    }
    mixed.sample_stride(w.stride)
}

/// Gradients of the lean convolution with respect to its weights.
#[derive(Clone, Debug)]
pub struct LeanConvGrads<T> {
    pub dalpha: Mat<T>,
    pub dstencil: Mat<T>,
}

impl<T: Scalar> LeanConvGrads<T> {
    pub fn zeros_like(w: &LeanConvWeights<T>) -> Self {
        Self {
            dalpha: Mat::zeros(w.alpha.rows(), w.alpha.cols()),
            dstencil: Mat::zeros(w.stencil.rows(), w.stencil.cols()),
        }
    }
}

/// Reverse-mode lean convolution: returns the input adjoint and the weight
/// gradients. The stride-2 adjoint scatters into even input positions.
pub fn lean_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &LeanConvWeights<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, LeanConvGrads<T>)> {
    check_channels("lean_conv2d_backward", w.c_in(), x.channels())?;
    let (b, c_in, h, wd) = x.shape();
    let (c_out, d, s) = (w.c_out(), w.diag_channels(), w.stride);
    let (oh, ow) = (strided_size(h, s), strided_size(wd, s));
    if dy.shape() != (b, c_out, oh, ow) {
        return Err(Error::shape(
            "lean_conv2d_backward",
            format!("{:?}", (b, c_out, oh, ow)),
            format!("{:?}", dy.shape()),
        ));
    }

    // Input adjoint, one (image, input-channel) plane per task.
    let mut dx = Tensor4::zeros(b, c_in, h, wd)?;
    let plane = h * wd;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dx_plane)| {
            let n = idx / c_in;
            let i = idx % c_in;
            // Transposed channel mix: dx_i += alpha[o][i] * dy_o at sampled positions.
            for o in 0..c_out {
                let a = w.alpha.get(o, i);
                for r in 0..oh {
                    let dy_row = dy.row(n, o, r);
                    if s == 1 {
                        let drow = &mut dx_plane[r * wd..(r + 1) * wd];
                        for (dv, g) in drow.iter_mut().zip(dy_row) {
                            *dv += a * *g;
                        }
                    } else {
                        let base = (r * s) * wd;
                        for (q, g) in dy_row.iter().enumerate() {
                            dx_plane[base + q * s] += a * *g;
                        }
                    }
                }
            }
            // Stencil adjoint: scatter each tap of dy_i around its source pixel.
            if i < d {
                let st = w.stencil.row(i);
                let (ct, cl, cr, cb) = (st[0], st[1], st[2], st[3]);
                for r in 0..oh {
                    let ih = r * s;
                    let dy_row = dy.row(n, i, r);
                    for (q, g) in dy_row.iter().enumerate() {
                        let iw = q * s;
                        if ih > 0 {
                            dx_plane[(ih - 1) * wd + iw] += ct * *g;
                        }
                        if iw > 0 {
                            dx_plane[ih * wd + iw - 1] += cl * *g;
                        }
                        if iw + 1 < wd {
                            dx_plane[ih * wd + iw + 1] += cr * *g;
                        }
                        if ih + 1 < h {
                            dx_plane[(ih + 1) * wd + iw] += cb * *g;
                        }
                    }
                }
            }
        });

    // Weight gradients, one output channel per task (each task reduces over
    // images and pixels sequentially, so results are thread-count independent).
    let mut grads = LeanConvGrads::zeros_like(w);
    let drows: Vec<(Vec<T>, Vec<T>)> = (0..c_out)
        .into_par_iter()
        .map(|o| {
            let mut dalpha_row = vec![T::zero(); c_in];
            let mut dstencil_row = vec![T::zero(); 4];
            for n in 0..b {
                for r in 0..oh {
                    let ih = r * s;
                    let dy_row = dy.row(n, o, r);
                    for (i, da) in dalpha_row.iter_mut().enumerate() {
                        let x_row = x.row(n, i, ih);
                        let mut acc = T::zero();
                        for (q, g) in dy_row.iter().enumerate() {
                            acc += *g * x_row[q * s];
                        }
                        *da += acc;
                    }
                    if o < d {
                        let (mut t, mut l, mut rg, mut bt) =
                            (T::zero(), T::zero(), T::zero(), T::zero());
                        if ih > 0 {
                            let x_row = x.row(n, o, ih - 1);
                            for (q, g) in dy_row.iter().enumerate() {
                                t += *g * x_row[q * s];
                            }
                        }
                        let x_row = x.row(n, o, ih);
                        for (q, g) in dy_row.iter().enumerate() {
                            let iw = q * s;
                            if iw > 0 {
                                l += *g * x_row[iw - 1];
                            }
                            if iw + 1 < wd {
                                rg += *g * x_row[iw + 1];
                            }
                        }
                        if ih + 1 < h {
                            let x_row = x.row(n, o, ih + 1);
                            for (q, g) in dy_row.iter().enumerate() {
                                bt += *g * x_row[q * s];
                            }
                        }
                        dstencil_row[0] += t;
                        dstencil_row[1] += l;
                        dstencil_row[2] += rg;
                        dstencil_row[3] += bt;
                    }
                }
            }
            (dalpha_row, dstencil_row)
        })
        .collect();
    for (o, (da, ds)) in drows.into_iter().enumerate() {
        grads.dalpha.row_mut(o).copy_from_slice(&da);
        if o < d {
            grads.dstencil.row_mut(o).copy_from_slice(&ds);
        }
    }

    Ok((dx, grads))
}

/// Standard cross-correlation with full channel coupling, zero padding
/// `k/2`, odd kernel. Per-pixel accumulation order: input channel, kernel
/// row, kernel column.
pub fn dense_conv2d<T: Scalar>(x: &Tensor4<T>, w: &DenseConvWeights<T>) -> Result<Tensor4<T>> {
    check_channels("dense_conv2d", w.c_in(), x.channels())?;
    let (b, c_in, h, wd) = x.shape();
    let (c_out, _, kh, kw) = w.kernel.shape();
    let s = w.stride;
    let (pad_h, pad_w) = (kh / 2, kw / 2);
    let (oh, ow) = (strided_size(h, s), strided_size(wd, s));
    let mut out = Tensor4::zeros(b, c_out, oh, ow)?;
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let n = idx / c_out;
            let o = idx % c_out;
            for r in 0..oh {
                let out_row = &mut out_plane[r * ow..(r + 1) * ow];
                for i in 0..c_in {
                    for ky in 0..kh {
                        let iy = (r * s + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x.row(n, i, iy as usize);
                        for kx in 0..kw {
                            let kval = w.kernel.at(o, i, ky, kx);
                            let shift = kx as isize - pad_w as isize;
                            // Valid q satisfy 0 <= q*s + shift < wd.
                            let q_min = if shift >= 0 {
                                0
                            } else {
                                div_ceil((-shift) as usize, s)
                            };
                            let last = wd as isize - 1 - shift;
                            if last < 0 {
                                continue;
                            }
                            let q_end = ((last as usize) / s + 1).min(ow);
                            for q in q_min..q_end {
                                let ix = (q * s) as isize + shift;
                                out_row[q] += kval * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Reverse-mode dense convolution: input adjoint plus kernel gradient.
pub fn dense_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &DenseConvWeights<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_channels("dense_conv2d_backward", w.c_in(), x.channels())?;
    let (b, c_in, h, wd) = x.shape();
    let (c_out, _, kh, kw) = w.kernel.shape();
    let s = w.stride;
    let (pad_h, pad_w) = (kh / 2, kw / 2);
    let (oh, ow) = (strided_size(h, s), strided_size(wd, s));
    if dy.shape() != (b, c_out, oh, ow) {
        return Err(Error::shape(
            "dense_conv2d_backward",
            format!("{:?}", (b, c_out, oh, ow)),
            format!("{:?}", dy.shape()),
        ));
    }

    let mut dx = Tensor4::zeros(b, c_in, h, wd)?;
    let plane = h * wd;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dx_plane)| {
            let n = idx / c_in;
            let i = idx % c_in;
            for o in 0..c_out {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kval = w.kernel.at(o, i, ky, kx);
                        for r in 0..oh {
                            let iy = (r * s + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dy_row = dy.row(n, o, r);
                            let base = iy as usize * wd;
                            for (q, g) in dy_row.iter().enumerate() {
                                let ix = (q * s + kx) as isize - pad_w as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                dx_plane[base + ix as usize] += kval * *g;
                            }
                        }
                    }
                }
            }
        });

    let mut dkernel = Tensor4::zeros(c_out, c_in, kh, kw)?;
    let kplane = c_in * kh * kw;
    dkernel
        .data_mut()
        .par_chunks_mut(kplane)
        .enumerate()
        .for_each(|(o, dk_plane)| {
            for n in 0..b {
                for r in 0..oh {
                    let dy_row = dy.row(n, o, r);
                    for i in 0..c_in {
                        for ky in 0..kh {
                            let iy = (r * s + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x.row(n, i, iy as usize);
                            for kx in 0..kw {
                                let shift = kx as isize - pad_w as isize;
                                let mut acc = T::zero();
                                for (q, g) in dy_row.iter().enumerate() {
                                    let ix = (q * s) as isize + shift;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += *g * x_row[ix as usize];
                                }
                                dk_plane[(i * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

    Ok((dx, dkernel))
}

/// Embeds the lean operator into an equivalent dense 3x3 kernel: block
/// centers carry the mixing matrix, the diagonal blocks additionally carry
/// the four stencil taps on their edge positions, corners stay zero.
pub fn lean_to_dense<T: Scalar>(w: &LeanConvWeights<T>) -> DenseConvWeights<T> {
    let (c_out, c_in, d) = (w.c_out(), w.c_in(), w.diag_channels());
    let mut kernel = Tensor4::zeros(c_out, c_in, 3, 3).expect("nonzero dims");
    for o in 0..c_out {
        for i in 0..c_in {
            kernel.set(o, i, 1, 1, w.alpha.get(o, i));
        }
        if o < d {
            let st = w.stencil.row(o);
            kernel.set(o, o, 0, 1, st[0]);
            kernel.set(o, o, 1, 0, st[1]);
            kernel.set(o, o, 1, 2, st[2]);
            kernel.set(o, o, 2, 1, st[3]);
        }
    }
    DenseConvWeights { kernel, stride: w.stride }
}

/// Layer kinds with a closed-form FLOP count (one multiply-accumulate
/// counts as two FLOPs; padded taps are counted like interior ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Lean,
    Dense3x3,
    Conv1x1,
    Depthwise4,
}

/// FLOPs of one layer applied to a single image with `h x w` output pixels.
pub fn layer_flops(kind: LayerKind, c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    let (c_in, c_out, h, w) = (c_in as u64, c_out as u64, h as u64, w as u64);
    let d = c_in.min(c_out);
    let per_pixel = match kind {
        LayerKind::Conv1x1 => 2 * c_in * c_out,
        LayerKind::Depthwise4 => 8 * d,
        LayerKind::Lean => 2 * c_in * c_out + 8 * d,
        LayerKind::Dense3x3 => 18 * c_in * c_out,
    };
    per_pixel * h * w
}
