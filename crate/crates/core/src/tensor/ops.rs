//! Forward and backward kernels for the layer primitives.
//!
//! Convolutions are cross-correlations (no kernel flip). Activations are
//! `(N, C, H, W)`; convolution kernels are `(out, in, kH, kW)`. Every kernel
//! here is a pure function, so the tape in [`super::Tape`] only has to record
//! which arguments went in.
//!
//! Batch items are processed in parallel, and per-item partial sums are
//! reduced in index order so results do not depend on the thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; stride 1 preserves spatial size.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Pairs with a sigmoid output.
    BinaryCrossEntropy,
    /// Pairs with a softmax output over the channel axis.
    CategoricalCrossEntropy,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (n, c, h, w) = input.dims4()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels but kernel expects {kc} (input {:?}, kernel {:?})", input.shape(), kernel.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel dims must be odd, got {kh}x{kw}")));
    }
    if bias.len() != f {
        return Err(shape_err("conv2d", format!("bias has {} entries for {f} filters", bias.len())));
    }
    if stride == 0 {
        return Err(invalid("conv2d stride must be positive"));
    }
    let (pad_h, pad_w) = match padding {
        Padding::Same => (kh / 2, kw / 2),
        Padding::Valid => (0, 0),
    };
    if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
    }
    let oh = (h + 2 * pad_h - kh) / stride + 1;
    let ow = (w + 2 * pad_w - kw) / stride + 1;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad_h,
        pad_w,
        oh,
        ow,
    })
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = &mut col[((ci * g.kh + a) * g.kw + b) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + a) as isize - g.pad_h as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + b) as isize - g.pad_w as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = &col[((ci * g.kh + a) * g.kw + b) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + a) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + b) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn ensure_all_finite<T: Real>(parts: &[(&Tensor<T>, &str)]) -> Result<()> {
    parts.iter().try_for_each(|(t, what)| t.ensure_finite(what))
}

/// 2-D cross-correlation plus per-filter bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    ensure_all_finite(&[(input, "conv2d input"), (kernel, "conv2d kernel"), (bias, "conv2d bias")])?;
    let p = g.out_plane();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.f * p];
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    out.par_chunks_mut(g.f * p).enumerate().for_each(|(ni, o)| {
        let xn = &x[ni * in_len..(ni + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(g.f, g.c, p, k, false, xn, false, o, false);
        } else {
            let mut col = vec![T::zero(); g.ck() * p];
            im2col(xn, &g, &mut col);
            T::gemm(g.f, g.ck(), p, k, false, &col, false, o, false);
        }
        for (fi, chunk) in o.chunks_mut(p).enumerate() {
            let bv = b[fi];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    });
    Tensor::new([g.n, g.f, g.oh, g.ow], out)
}

/// Gradients of a convolution (or transposed convolution) with respect to
/// its three arguments.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    grad_out: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    let p = g.out_plane();
    if grad_out.len() != g.n * g.f * p {
        return Err(shape_err("conv2d_backward", "gradient length does not match output"));
    }
    let in_len = g.c * g.h * g.w;
    let x = input.data();
    let k = kernel.data();
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let xn = &x[ni * in_len..(ni + 1) * in_len];
            let dout = &grad_out[ni * g.f * p..(ni + 1) * g.f * p];
            let mut dk = vec![T::zero(); g.f * g.ck()];
            let mut dx = vec![T::zero(); in_len];
            if g.is_pointwise() {
                T::gemm(g.f, p, g.c, dout, false, xn, true, &mut dk, false);
                T::gemm(g.c, g.f, p, k, true, dout, false, &mut dx, false);
            } else {
                let mut col = vec![T::zero(); g.ck() * p];
                im2col(xn, &g, &mut col);
                T::gemm(g.f, p, g.ck(), dout, false, &col, true, &mut dk, false);
                T::gemm(g.ck(), g.f, p, k, true, dout, false, &mut col, false);
                col2im(&col, &g, &mut dx);
            }
            (dx, dk)
        })
        .collect();
    let mut dinput = Vec::with_capacity(g.n * in_len);
    let mut dkernel = vec![T::zero(); g.f * g.ck()];
    for (dx, dk) in per_item {
        dinput.extend_from_slice(&dx);
        dkernel.iter_mut().zip(&dk).for_each(|(a, &b)| *a = *a + b);
    }
    let dbias = channel_sums(grad_out, g.n, g.f, p);
    Ok(ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias,
    })
}

fn channel_sums<T: Real>(values: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, s) in sums.iter_mut().enumerate() {
            let start = (ni * c + ci) * plane;
            *s = *s + values[start..start + plane].iter().copied().sum::<T>();
        }
    }
    sums
}

#[derive(Clone, Copy, Debug)]
struct UpGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl UpGeom {
    fn oh(&self) -> usize {
        self.h * self.stride
    }
    fn ow(&self) -> usize {
        self.w * self.stride
    }
    fn fkk(&self) -> usize {
        self.f * self.kh * self.kw
    }
}

fn up_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<UpGeom> {
    let (n, c, h, w) = input.dims4()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(shape_err(
            "transpose_conv2d",
            format!("input has {c} channels but kernel expects {kc}"),
        ));
    }
    if bias.len() != f {
        return Err(shape_err("transpose_conv2d", format!("bias has {} entries for {f} filters", bias.len())));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(invalid("transpose_conv2d needs positive stride and kernel size"));
    }
    Ok(UpGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad_h: kh.saturating_sub(stride) / 2,
        pad_w: kw.saturating_sub(stride) / 2,
    })
}

/// `(F, C, kh, kw)` kernel laid out as a `(F*kh*kw) x C` matrix.
fn permute_up_kernel<T: Real>(k: &[T], g: &UpGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.fkk() * g.c];
    for f in 0..g.f {
        for c in 0..g.c {
            for a in 0..g.kh {
                for b in 0..g.kw {
                    out[((f * g.kh + a) * g.kw + b) * g.c + c] = k[((f * g.c + c) * g.kh + a) * g.kw + b];
                }
            }
        }
    }
    out
}

fn unpermute_up_kernel<T: Real>(kr: &[T], g: &UpGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.fkk() * g.c];
    for f in 0..g.f {
        for c in 0..g.c {
            for a in 0..g.kh {
                for b in 0..g.kw {
                    out[((f * g.c + c) * g.kh + a) * g.kw + b] = kr[((f * g.kh + a) * g.kw + b) * g.c + c];
                }
            }
        }
    }
    out
}

/// Output coordinate hit by input `i` and kernel tap `a`, if inside the
/// `stride * size` output.
#[inline]
fn up_target(i: usize, a: usize, stride: usize, pad: usize, out: usize) -> Option<usize> {
    let o = (i * stride + a).checked_sub(pad)?;
    (o < out).then_some(o)
}

/// Transposed convolution whose output is exactly `stride` times the input
/// in both spatial dims.
pub fn transpose_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = up_geometry(input, kernel, bias, stride)?;
    ensure_all_finite(&[(input, "transpose_conv2d input"), (kernel, "transpose_conv2d kernel")])?;
    let (oh, ow) = (g.oh(), g.ow());
    let hw = g.h * g.w;
    let kr = permute_up_kernel(kernel.data(), &g);
    let x = input.data();
    let b = bias.data();
    let mut out = vec![T::zero(); g.n * g.f * oh * ow];
    out.par_chunks_mut(g.f * oh * ow).enumerate().for_each(|(ni, o)| {
        let xn = &x[ni * g.c * hw..(ni + 1) * g.c * hw];
        let mut cols = vec![T::zero(); g.fkk() * hw];
        T::gemm(g.fkk(), g.c, hw, &kr, false, xn, false, &mut cols, false);
        for f in 0..g.f {
            let plane = &mut o[f * oh * ow..(f + 1) * oh * ow];
            for a in 0..g.kh {
                for bb in 0..g.kw {
                    let row = &cols[((f * g.kh + a) * g.kw + bb) * hw..][..hw];
                    for i in 0..g.h {
                        let Some(oy) = up_target(i, a, g.stride, g.pad_h, oh) else { continue };
                        for j in 0..g.w {
                            if let Some(ox) = up_target(j, bb, g.stride, g.pad_w, ow) {
                                plane[oy * ow + ox] = plane[oy * ow + ox] + row[i * g.w + j];
                            }
                        }
                    }
                }
            }
            let bv = b[f];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    });
    Tensor::new([g.n, g.f, oh, ow], out)
}

pub fn transpose_conv2d_backward<T: Real>(
    grad_out: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let g = up_geometry(input, kernel, bias, stride)?;
    let (oh, ow) = (g.oh(), g.ow());
    if grad_out.len() != g.n * g.f * oh * ow {
        return Err(shape_err("transpose_conv2d_backward", "gradient length does not match output"));
    }
    let hw = g.h * g.w;
    let kr = permute_up_kernel(kernel.data(), &g);
    let x = input.data();
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let xn = &x[ni * g.c * hw..(ni + 1) * g.c * hw];
            let dout = &grad_out[ni * g.f * oh * ow..(ni + 1) * g.f * oh * ow];
            let mut dcols = vec![T::zero(); g.fkk() * hw];
            for f in 0..g.f {
                let plane = &dout[f * oh * ow..(f + 1) * oh * ow];
                for a in 0..g.kh {
                    for bb in 0..g.kw {
                        let row = &mut dcols[((f * g.kh + a) * g.kw + bb) * hw..][..hw];
                        for i in 0..g.h {
                            let Some(oy) = up_target(i, a, g.stride, g.pad_h, oh) else { continue };
                            for j in 0..g.w {
                                if let Some(ox) = up_target(j, bb, g.stride, g.pad_w, ow) {
                                    row[i * g.w + j] = plane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
            let mut dx = vec![T::zero(); g.c * hw];
            T::gemm(g.c, g.fkk(), hw, &kr, true, &dcols, false, &mut dx, false);
            let mut dkr = vec![T::zero(); g.fkk() * g.c];
            T::gemm(g.fkk(), hw, g.c, &dcols, false, xn, true, &mut dkr, false);
            (dx, dkr)
        })
        .collect();
    let mut dinput = Vec::with_capacity(g.n * g.c * hw);
    let mut dkr = vec![T::zero(); g.fkk() * g.c];
    for (dx, dk) in per_item {
        dinput.extend_from_slice(&dx);
        dkr.iter_mut().zip(&dk).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(ConvGrads {
        input: dinput,
        kernel: unpermute_up_kernel(&dkr, &g),
        bias: channel_sums(grad_out, g.n, g.f, oh * ow),
    })
}

/// Per-channel running mean and (biased) variance used in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Batch statistics; running stats move by `momentum` toward them.
    Train { momentum: f64 },
    Infer,
}

impl BatchNormMode {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn train() -> Self {
        BatchNormMode::Train {
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }
}

/// Saved forward state needed by [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err("batch_norm", format!("need at least (N, C), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BatchNormMode,
    running: &mut RunningStats<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, s) = channel_layout(input.shape())?;
    if gamma.len() != c || beta.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(shape_err(
            "batch_norm",
            format!("{c} channels but gamma/beta/running have {}/{}/{}", gamma.len(), beta.len(), running.mean.len()),
        ));
    }
    input.ensure_finite("batch_norm input")?;
    let x = input.data();
    let eps = T::lit(epsilon);
    let count = T::from_usize(n * s).expect("count fits");
    let (mean, var, batch_stats) = match mode {
        BatchNormMode::Train { momentum } => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let start = (ni * c + ci) * s;
                    acc = acc + x[start..start + s].iter().copied().sum::<T>();
                }
                let m = acc / count;
                let mut sq = T::zero();
                for ni in 0..n {
                    let start = (ni * c + ci) * s;
                    sq = sq + x[start..start + s].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ci] = m;
                var[ci] = sq / count;
            }
            let mom = T::lit(momentum);
            for ci in 0..c {
                running.mean[ci] = (T::one() - mom) * running.mean[ci] + mom * mean[ci];
                running.var[ci] = (T::one() - mom) * running.var[ci] + mom * var[ci];
            }
            (mean, var, true)
        }
        BatchNormMode::Infer => (running.mean.clone(), running.var.clone(), false),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (gm, bt) = (gamma.data(), beta.data());
    for ni in 0..n {
        for ci in 0..c {
            let start = (ni * c + ci) * s;
            for i in start..start + s {
                let xh = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = gm[ci] * xh + bt[ci];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
    ))
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    grad_out: &[T],
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<BnGrads<T>> {
    let (n, c, s) = channel_layout(shape)?;
    if grad_out.len() != cache.xhat.len() {
        return Err(shape_err("batch_norm_backward", "gradient length does not match input"));
    }
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let start = (ni * c + ci) * s;
            for i in start..start + s {
                dbeta[ci] = dbeta[ci] + grad_out[i];
                dgamma[ci] = dgamma[ci] + grad_out[i] * cache.xhat[i];
            }
        }
    }
    let g = gamma.data();
    let mut dx = vec![T::zero(); grad_out.len()];
    let count = T::from_usize(n * s).expect("count fits");
    for ni in 0..n {
        for ci in 0..c {
            let start = (ni * c + ci) * s;
            let scale = g[ci] * cache.inv_std[ci];
            for i in start..start + s {
                dx[i] = if cache.batch_stats {
                    scale / count * (count * grad_out[i] - dbeta[ci] - cache.xhat[i] * dgamma[ci])
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// 2x2 max pooling with stride 2. Returns the output and, for each output
/// element, the flat input index it came from (ties go to the first window
/// position in row-major order).
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2x2", format!("spatial dims must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Concatenates along the channel axis in operand order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("operand {:?} does not match N,H,W of {:?}", p.shape(), first.shape()),
            ));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[ni * pc * plane..(ni + 1) * pc * plane]);
        }
    }
    Tensor::new([n, total_c, h, w], out)
}

/// Splits a concat gradient back into per-operand pieces.
pub fn concat_channels_backward<T: Real>(grad_out: &[T], shapes: &[&[usize]]) -> Vec<Vec<T>> {
    let n = shapes[0][0];
    let plane: usize = shapes[0][2..].iter().product();
    let total_c: usize = shapes.iter().map(|s| s[1]).sum();
    let mut grads: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for ni in 0..n {
        let mut offset = ni * total_c * plane;
        for (g, s) in grads.iter_mut().zip(shapes) {
            let len = s[1] * plane;
            g.extend_from_slice(&grad_out[offset..offset + len]);
            offset += len;
        }
    }
    grads
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(grad_out: &[T], input: &[T]) -> Vec<T> {
    grad_out
        .iter()
        .zip(input)
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(grad_out: &[T], output: &[T]) -> Vec<T> {
    grad_out
        .iter()
        .zip(output)
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect()
}

/// Softmax over axis 1 of a tensor of rank >= 2.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = softmax_layout(input.shape())?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for si in 0..s {
            let at = |ci: usize| (ni * c + ci) * s + si;
            let max = (0..c).map(|ci| x[at(ci)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ci in 0..c {
                let e = (x[at(ci)] - max).exp();
                out[at(ci)] = e;
                total = total + e;
            }
            for ci in 0..c {
                out[at(ci)] = out[at(ci)] / total;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

fn softmax_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err("softmax", format!("need rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn softmax_backward<T: Real>(grad_out: &[T], output: &Tensor<T>) -> Result<Vec<T>> {
    let (n, c, s) = softmax_layout(output.shape())?;
    let y = output.data();
    let mut dx = vec![T::zero(); y.len()];
    for ni in 0..n {
        for si in 0..s {
            let at = |ci: usize| (ni * c + ci) * s + si;
            let dot: T = (0..c).map(|ci| y[at(ci)] * grad_out[at(ci)]).sum();
            for ci in 0..c {
                dx[at(ci)] = y[at(ci)] * (grad_out[at(ci)] - dot);
            }
        }
    }
    Ok(dx)
}

/// Fully connected layer over the flattened trailing dims: `(N, ...) -> (N, O)`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, o) = dense_dims(input, weight, bias)?;
    input.ensure_finite("dense input")?;
    let mut out = vec![T::zero(); n * o];
    T::gemm(n, d, o, input.data(), false, weight.data(), true, &mut out, false);
    for row in out.chunks_mut(o) {
        row.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v = *v + b);
    }
    Tensor::new([n, o], out)
}

fn dense_dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let n = *input.shape().first().ok_or_else(|| shape_err("dense", "scalar input"))?;
    let d: usize = input.shape()[1..].iter().product();
    match weight.shape() {
        &[o, wd] if wd == d && bias.len() == o => Ok((n, d, o)),
        s => Err(shape_err(
            "dense",
            format!("weight {s:?} / bias {} incompatible with {d} input features", bias.len()),
        )),
    }
}

pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(
    grad_out: &[T],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, d, o) = dense_dims(input, weight, bias)?;
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, o, d, grad_out, false, weight.data(), false, &mut dx, false);
    let mut dw = vec![T::zero(); o * d];
    T::gemm(o, n, d, grad_out, true, input.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); o];
    for row in grad_out.chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Mean loss and its gradient with respect to the predicted probabilities.
///
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log;
/// the clamp passes gradients straight through so saturated wrong predictions
/// still receive a training signal.
pub fn loss<T: Real>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Vec<T>)> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    pred.ensure_finite("loss prediction")?;
    let eps = T::lit(PROB_EPS);
    let clamp = |p: T| p.max(eps).min(T::one() - eps);
    let p = pred.data();
    let y = target.data();
    match kind {
        LossKind::BinaryCrossEntropy => {
            if let Some(bad) = y.iter().find(|&&v| v != T::zero() && v != T::one()) {
                return Err(invalid(format!("binary cross-entropy target {bad} outside {{0, 1}}")));
            }
            let count = T::from_usize(p.len()).expect("count fits");
            let mut total = T::zero();
            let mut grad = Vec::with_capacity(p.len());
            for (&pi, &yi) in p.iter().zip(y) {
                let q = clamp(pi);
                total = total - (yi * q.ln() + (T::one() - yi) * (T::one() - q).ln());
                grad.push((-yi / q + (T::one() - yi) / (T::one() - q)) / count);
            }
            Ok((total / count, grad))
        }
        LossKind::CategoricalCrossEntropy => {
            let (n, c, s) = softmax_layout(pred.shape())?;
            for ni in 0..n {
                for si in 0..s {
                    let mut sum = T::zero();
                    for ci in 0..c {
                        let v = y[(ni * c + ci) * s + si];
                        if v != T::zero() && v != T::one() {
                            return Err(invalid(format!("categorical target entry {v} is not one-hot")));
                        }
                        sum = sum + v;
                    }
                    if sum != T::one() {
                        return Err(invalid(format!("categorical target at item {ni} is not one-hot")));
                    }
                }
            }
            let positions = T::from_usize(n * s).expect("count fits");
            let mut total = T::zero();
            let mut grad = Vec::with_capacity(p.len());
            for (&pi, &yi) in p.iter().zip(y) {
                let q = clamp(pi);
                total = total - yi * q.ln();
                grad.push(-yi / q / positions);
            }
            Ok((total / positions, grad))
        }
    }
}
