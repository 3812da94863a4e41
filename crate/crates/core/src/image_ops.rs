//! Image operators: 2-D convolution, ReLU, the cascaded convolution unit and
//! bicubic resampling, together with the adjoint kernels used by the
//! differentiation engine.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Convolution weights `out × in × k × k` plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        check_kernel(&weight, &bias)?;
        Ok(ConvKernel { weight, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, size: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![out_ch, in_ch, size, size]),
            Tensor::zeros(vec![out_ch]),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Sets `weight[o, i, ky, kx]`.
    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: T) {
        let (ci, k) = (self.in_channels(), self.size());
        self.weight.data_mut()[((o * ci + i) * k + ky) * k + kx] = v;
    }
}

pub(crate) fn check_kernel<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (co, _, kh, kw) = match weight.shape() {
        &[co, ci, kh, kw] => (co, ci, kh, kw),
        s => return shape_err(format!("conv weight must be 4-d (out, in, kh, kw), got {s:?}")),
    };
    if kh != kw {
        return arg_err(format!("conv kernel must be square, got {kh}x{kw}"));
    }
    if kh % 2 == 0 {
        return arg_err(format!("conv kernel size must be odd, got {kh}"));
    }
    if bias.shape() != [co] {
        return shape_err(format!(
            "conv bias {:?} does not match {co} output channels",
            bias.shape()
        ));
    }
    Ok(())
}

#[inline(always)]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row and column ranges where a tap at offset `d` stays inside `[0, n)`.
#[inline(always)]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn of<T: Scalar>(x_shape: &[usize], weight: &Tensor<T>) -> Result<Self> {
        let (n, ci, h, w) = match *x_shape {
            [n, c, h, w] => (n, c, h, w),
            ref s => return shape_err(format!("conv2d input must be 4-d, got {s:?}")),
        };
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return arg_err(format!("conv2d needs an odd square kernel, got {ws:?}"));
        }
        if ws[1] != ci {
            return shape_err(format!(
                "conv2d kernel expects {} input channels but input {x_shape:?} has {ci}",
                ws[1]
            ));
        }
        Ok(ConvGeom {
            n,
            ci,
            co: ws[0],
            h,
            w,
            k: ws[2],
        })
    }
}

#[inline(always)]
fn conv_forward_body<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], bias: &[T], out: &mut [T]) {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    for b in 0..g.n {
        for o in 0..g.co {
            let plane = &mut out[(b * g.co + o) * hw..][..hw];
            plane.fill(bias[o]);
            for i in 0..g.ci {
                let src = &x[(b * g.ci + i) * hw..][..hw];
                for ky in 0..g.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(g.h, dy);
                    for kx in 0..g.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(g.w, dx);
                        let a = wt[((o * g.ci + i) * g.k + ky) * g.k + kx];
                        if a == T::zero() || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            axpy(
                                &mut plane[y * g.w + x0..y * g.w + x1],
                                &src[sy * g.w + sx..sy * g.w + sx + (x1 - x0)],
                                a,
                            );
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn conv_input_grad_body<T: Scalar>(g: &ConvGeom, gout: &[T], wt: &[T], gin: &mut [T]) {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    for b in 0..g.n {
        for i in 0..g.ci {
            let dst = &mut gin[(b * g.ci + i) * hw..][..hw];
            for o in 0..g.co {
                let go = &gout[(b * g.co + o) * hw..][..hw];
                for ky in 0..g.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(g.h, dy);
                    for kx in 0..g.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(g.w, dx);
                        let a = wt[((o * g.ci + i) * g.k + ky) * g.k + kx];
                        if a == T::zero() || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            axpy(
                                &mut dst[sy * g.w + sx..sy * g.w + sx + (x1 - x0)],
                                &go[y * g.w + x0..y * g.w + x1],
                                a,
                            );
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn conv_weight_grad_body<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    for b in 0..g.n {
        for o in 0..g.co {
            let go = &gout[(b * g.co + o) * hw..][..hw];
            gb[o] += go.iter().copied().sum::<T>();
            for i in 0..g.ci {
                let src = &x[(b * g.ci + i) * hw..][..hw];
                for ky in 0..g.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(g.h, dy);
                    for kx in 0..g.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(g.w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            acc += dot(
                                &go[y * g.w + x0..y * g.w + x1],
                                &src[sy * g.w + sx..sy * g.w + sx + (x1 - x0)],
                            );
                        }
                        gw[((o * g.ci + i) * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

// The bodies above are written so that LLVM vectorizes the row loops; the
// AVX2 copies only widen the vectors. No FMA is enabled, so both paths give
// bit-identical results.
#[cfg(target_arch = "x86_64")]
mod wide {
    use super::*;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn conv_forward<T: Scalar>(
        g: &ConvGeom,
        x: &[T],
        wt: &[T],
        bias: &[T],
        out: &mut [T],
    ) {
        conv_forward_body(g, x, wt, bias, out)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn conv_input_grad<T: Scalar>(
        g: &ConvGeom,
        gout: &[T],
        wt: &[T],
        gin: &mut [T],
    ) {
        conv_input_grad_body(g, gout, wt, gin)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn conv_weight_grad<T: Scalar>(
        g: &ConvGeom,
        x: &[T],
        gout: &[T],
        gw: &mut [T],
        gb: &mut [T],
    ) {
        conv_weight_grad_body(g, x, gout, gw, gb)
    }

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx2")
    }
}

/// Zero-padded "same" cross-correlation of `x` (`n × ci × h × w`) with
/// `weight` (`co × ci × k × k`) plus `bias`.
pub fn conv2d_raw<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::of(x.shape(), weight)?;
    if bias.shape() != [g.co] {
        return shape_err(format!(
            "conv2d bias {:?} does not match {} output channels",
            bias.shape(),
            g.co
        ));
    }
    let mut out = Tensor::zeros(vec![g.n, g.co, g.h, g.w]);
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        unsafe { wide::conv_forward(&g, x.data(), weight.data(), bias.data(), out.data_mut()) };
        return Ok(out);
    }
    conv_forward_body(&g, x.data(), weight.data(), bias.data(), out.data_mut());
    Ok(out)
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &k.weight, &k.bias)
}

/// Gradient of conv2d with respect to its input: correlation of the output
/// gradient with the 180°-rotated, channel-transposed kernel.
pub fn conv2d_input_grad<T: Scalar>(gout: &Tensor<T>, weight: &Tensor<T>, x_shape: &[usize]) -> Result<Tensor<T>> {
    let g = ConvGeom::of(x_shape, weight)?;
    if gout.shape() != [g.n, g.co, g.h, g.w] {
        return shape_err(format!("conv2d output gradient {:?} has the wrong shape", gout.shape()));
    }
    let mut gin = Tensor::zeros(x_shape.to_vec());
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        unsafe { wide::conv_input_grad(&g, gout.data(), weight.data(), gin.data_mut()) };
        return Ok(gin);
    }
    conv_input_grad_body(&g, gout.data(), weight.data(), gin.data_mut());
    Ok(gin)
}

/// Gradients of conv2d with respect to its weight and bias.
pub fn conv2d_param_grad<T: Scalar>(
    x: &Tensor<T>,
    gout: &Tensor<T>,
    weight_shape: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut gw = Tensor::zeros(weight_shape.to_vec());
    let g = ConvGeom::of(x.shape(), &gw)?;
    if gout.shape() != [g.n, g.co, g.h, g.w] {
        return shape_err(format!("conv2d output gradient {:?} has the wrong shape", gout.shape()));
    }
    let mut gb = Tensor::zeros(vec![g.co]);
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        unsafe { wide::conv_weight_grad(&g, x.data(), gout.data(), gw.data_mut(), gb.data_mut()) };
        return Ok((gw, gb));
    }
    conv_weight_grad_body(&g, x.data(), gout.data(), gw.data_mut(), gb.data_mut());
    Ok((gw, gb))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// `conv2d(relu(conv2d(x, k1)), k2)`.
pub fn conv_block<T: Scalar>(x: &Tensor<T>, k1: &ConvKernel<T>, k2: &ConvKernel<T>) -> Result<Tensor<T>> {
    if k1.out_channels() != k2.in_channels() {
        return shape_err(format!(
            "conv block chain broken: first conv emits {} channels, second expects {}",
            k1.out_channels(),
            k2.in_channels()
        ));
    }
    conv2d(&relu(&conv2d(x, k1)?), k2)
}

/// Rotates every spatial kernel by 180° and swaps the in/out axes, turning a
/// `co × ci × k × k` weight into `ci × co × k × k`. This is the kernel of the
/// adjoint convolution.
pub fn flip_transpose<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return shape_err(format!("expected a 4-d kernel, got {s:?}")),
    };
    let src = w.data();
    let mut out = Tensor::zeros(vec![ci, co, kh, kw]);
    let dst = out.data_mut();
    for o in 0..co {
        for i in 0..ci {
            for y in 0..kh {
                for x in 0..kw {
                    dst[((i * co + o) * kh + (kh - 1 - y)) * kw + (kw - 1 - x)] =
                        src[((o * ci + i) * kh + y) * kw + x];
                }
            }
        }
    }
    Ok(out)
}

/// Integer resampling factor for [`bicubic_resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Up(usize),
    Down(usize),
}

impl Scale {
    fn ratio(self) -> usize {
        match self {
            Scale::Up(r) | Scale::Down(r) => r,
        }
    }

    pub fn output_len(self, n: usize) -> Result<usize> {
        match self {
            _ if self.ratio() == 0 => arg_err("resize ratio must be positive"),
            Scale::Up(r) => Ok(n * r),
            Scale::Down(r) if n % r != 0 => arg_err(format!(
                "cannot downsample extent {n} by {r}: not divisible"
            )),
            Scale::Down(r) => Ok(n / r),
        }
    }

    /// Source coordinate of output sample `dst` (half-pixel centres).
    pub fn source_coord(self, dst: usize) -> f64 {
        let c = dst as f64 + 0.5;
        match self {
            Scale::Up(r) => c / r as f64 - 0.5,
            Scale::Down(r) => c * r as f64 - 0.5,
        }
    }
}

pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Precomputed four-tap interpolation weights along one axis, with edge
/// clamping.
#[derive(Clone, Debug)]
pub struct AxisTaps<T> {
    pub src_len: usize,
    pub dst_len: usize,
    taps: Vec<[(usize, T); 4]>,
}

impl<T: Scalar> AxisTaps<T> {
    pub fn new(src_len: usize, scale: Scale) -> Result<Self> {
        if src_len == 0 {
            return arg_err("cannot resize an empty axis");
        }
        let dst_len = scale.output_len(src_len)?;
        let last = src_len as isize - 1;
        let taps = (0..dst_len)
            .map(|d| {
                let s = scale.source_coord(d);
                let base = s.floor();
                let mut t = [(0usize, T::zero()); 4];
                for (j, slot) in t.iter_mut().enumerate() {
                    let idx = base as isize - 1 + j as isize;
                    let w = cubic_weight(s - idx as f64);
                    *slot = (idx.clamp(0, last) as usize, T::of(w));
                }
                t
            })
            .collect();
        Ok(AxisTaps {
            src_len,
            dst_len,
            taps,
        })
    }

    pub fn taps(&self, dst: usize) -> &[(usize, T); 4] {
        &self.taps[dst]
    }
}

/// Separable bicubic resampling plan for a fixed input size.
#[derive(Clone, Debug)]
pub struct ResizePlan<T> {
    pub rows: AxisTaps<T>,
    pub cols: AxisTaps<T>,
}

impl<T: Scalar> ResizePlan<T> {
    pub fn new(h: usize, w: usize, scale: Scale) -> Result<Self> {
        Ok(ResizePlan {
            rows: AxisTaps::new(h, scale)?,
            cols: AxisTaps::new(w, scale)?,
        })
    }

    pub fn output_shape(&self, n: usize, c: usize) -> Vec<usize> {
        vec![n, c, self.rows.dst_len, self.cols.dst_len]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if (h, w) != (self.rows.src_len, self.cols.src_len) {
            return shape_err(format!(
                "resize plan built for {}x{} applied to {h}x{w}",
                self.rows.src_len, self.cols.src_len
            ));
        }
        let (oh, ow) = (self.rows.dst_len, self.cols.dst_len);
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (ox, t) in tmp[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *t = self.cols.taps(ox).iter().map(|&(i, wt)| wt * row[i]).sum();
                }
            }
            for oy in 0..oh {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for &(iy, wt) in self.rows.taps(oy) {
                    axpy(drow, &tmp[iy * ow..(iy + 1) * ow], wt);
                }
            }
        }
        Ok(out)
    }

    /// Applies the transpose of the resampling operator (its adjoint).
    pub fn apply_transpose(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, oh, ow) = g.dims4()?;
        if (oh, ow) != (self.rows.dst_len, self.cols.dst_len) {
            return shape_err(format!(
                "resize adjoint expects {}x{} gradient, got {oh}x{ow}",
                self.rows.dst_len, self.cols.dst_len
            ));
        }
        let (h, w) = (self.rows.src_len, self.cols.src_len);
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = Tensor::zeros(vec![n, c, h, w]);
        for (src, dst) in g.data().chunks(oh * ow).zip(out.data_mut().chunks_mut(h * w)) {
            tmp.fill(T::zero());
            for oy in 0..oh {
                let grow = &src[oy * ow..(oy + 1) * ow];
                for &(iy, wt) in self.rows.taps(oy) {
                    axpy(&mut tmp[iy * ow..(iy + 1) * ow], grow, wt);
                }
            }
            for y in 0..h {
                let trow = &tmp[y * ow..(y + 1) * ow];
                let drow = &mut dst[y * w..(y + 1) * w];
                for (ox, &gv) in trow.iter().enumerate() {
                    for &(ix, wt) in self.cols.taps(ox) {
                        drow[ix] += wt * gv;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bicubic resampling of a 4-d image by an integer factor.
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, scale: Scale) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    ResizePlan::new(h, w, scale)?.apply(x)
}
