//! Observation models `L = DKH` and `P = HS`, their adjoints, the Wald
//! degradation used to build training pairs, per-patch normalization and
//! a synthetic scene generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Blur kernel `K`, decimation ratio `r` and spectral response `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Row-major `blur_size × blur_size` kernel, sums to one.
    pub blur: Vec<f64>,
    pub blur_size: usize,
    pub ratio: usize,
    /// One nonnegative weight per band, sums to one.
    pub spectral: Vec<f64>,
}

impl DegradationSpec {
    pub fn new(blur: Vec<f64>, blur_size: usize, ratio: usize, spectral: Vec<f64>) -> Result<Self> {
        let spec = DegradationSpec {
            blur,
            blur_size,
            ratio,
            spectral,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Normalized Gaussian blur of odd `size` with standard deviation
    /// `sigma`, uniform spectral weights over `bands`.
    pub fn gaussian(size: usize, sigma: f64, ratio: usize, bands: usize) -> Result<Self> {
        if size % 2 == 0 || sigma <= 0.0 {
            return arg_err(format!("gaussian blur needs odd size and sigma > 0, got {size}, {sigma}"));
        }
        let c = (size / 2) as f64;
        let mut blur: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = blur.iter().sum();
        blur.iter_mut().for_each(|v| *v /= total);
        if bands == 0 {
            return arg_err("at least one band is required");
        }
        Self::new(blur, size, ratio, vec![1.0 / bands as f64; bands])
    }

    /// 7×7 Gaussian with σ = 2, ratio 4, uniform spectral response.
    pub fn default_for_bands(bands: usize) -> Self {
        Self::gaussian(7, 2.0, 4, bands).expect("default degradation is valid")
    }

    pub fn bands(&self) -> usize {
        self.spectral.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_size % 2 == 0 || self.blur.len() != self.blur_size * self.blur_size {
            return arg_err(format!(
                "blur must be an odd square kernel, got {} values for size {}",
                self.blur.len(),
                self.blur_size
            ));
        }
        let bs: f64 = self.blur.iter().sum();
        if (bs - 1.0).abs() > 1e-6 {
            return arg_err(format!("blur kernel sums to {bs}, expected 1"));
        }
        if self.ratio < 2 {
            return arg_err(format!("ratio must be at least 2, got {}", self.ratio));
        }
        if self.spectral.is_empty() || self.spectral.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return arg_err("spectral weights must be nonnegative and non-empty");
        }
        let ss: f64 = self.spectral.iter().sum();
        if (ss - 1.0).abs() > 1e-6 {
            return arg_err(format!("spectral weights sum to {ss}, expected 1"));
        }
        Ok(())
    }

    fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        if h % self.ratio != 0 || w % self.ratio != 0 {
            return arg_err(format!(
                "image {h}x{w} is not divisible by ratio {}",
                self.ratio
            ));
        }
        Ok(())
    }
}

/// Circular blur with `spec.blur` followed by keeping every `r`-th pixel
/// from offset 0: `L = DKH` applied per band.
pub fn apply_blur_downsample<T: Scalar>(h: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    let (n, c, hh, ww) = h.dims4()?;
    spec.check_divisible(hh, ww)?;
    let (r, k) = (spec.ratio, spec.blur_size);
    let p = k / 2;
    let (oh, ow) = (hh / r, ww / r);
    let blur: Vec<T> = spec.blur.iter().map(|&v| T::of(v)).collect();
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for (src, dst) in h.data().chunks(hh * ww).zip(out.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (oy * r, ox * r);
                let mut acc = T::zero();
                for a in 0..k {
                    let sy = (y + hh * k + p - a) % hh;
                    let row = &src[sy * ww..(sy + 1) * ww];
                    for b in 0..k {
                        let sx = (x + ww * k + p - b) % ww;
                        acc += blur[a * k + b] * row[sx];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// `(DK)ᵀ`: zero-insertion upsampling followed by circular correlation with
/// the blur kernel. `height × width` is the full-resolution size.
pub fn blur_downsample_adjoint<T: Scalar>(
    l: &Tensor<T>,
    spec: &DegradationSpec,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (n, c, lh, lw) = l.dims4()?;
    spec.check_divisible(height, width)?;
    let (r, k) = (spec.ratio, spec.blur_size);
    if (lh * r, lw * r) != (height, width) {
        return shape_err(format!(
            "low-resolution {lh}x{lw} times ratio {r} does not give {height}x{width}"
        ));
    }
    let p = k / 2;
    let blur: Vec<T> = spec.blur.iter().map(|&v| T::of(v)).collect();
    let mut out = Tensor::zeros(vec![n, c, height, width]);
    for (src, dst) in l.data().chunks(lh * lw).zip(out.data_mut().chunks_mut(height * width)) {
        for oy in 0..lh {
            for ox in 0..lw {
                let v = src[oy * lw + ox];
                let (y, x) = (oy * r, ox * r);
                for a in 0..k {
                    let sy = (y + height * k + p - a) % height;
                    for b in 0..k {
                        let sx = (x + width * k + p - b) % width;
                        dst[sy * width + sx] += blur[a * k + b] * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `P = HS`: per-pixel weighted sum of the bands.
pub fn apply_spectral_response<T: Scalar>(h: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    let (n, c, hh, ww) = h.dims4()?;
    if c != spec.bands() {
        return shape_err(format!(
            "image has {c} bands but the spectral response has {} weights",
            spec.bands()
        ));
    }
    let plane = hh * ww;
    let mut out = Tensor::zeros(vec![n, 1, hh, ww]);
    for (src, dst) in h.data().chunks(c * plane).zip(out.data_mut().chunks_mut(plane)) {
        for (b, &w) in spec.spectral.iter().enumerate() {
            let w = T::of(w);
            for (d, &s) in dst.iter_mut().zip(&src[b * plane..(b + 1) * plane]) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// `P Sᵀ`: spreads a single-band image over the bands with the spectral
/// weights.
pub fn spectral_adjoint<T: Scalar>(p: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    let (n, c, hh, ww) = p.dims4()?;
    if c != 1 {
        return shape_err(format!("expected a single-band image, got {c} bands"));
    }
    let (bands, plane) = (spec.bands(), hh * ww);
    let mut out = Tensor::zeros(vec![n, bands, hh, ww]);
    for (src, dst) in p.data().chunks(plane).zip(out.data_mut().chunks_mut(bands * plane)) {
        for (b, &w) in spec.spectral.iter().enumerate() {
            let w = T::of(w);
            for (d, &s) in dst[b * plane..(b + 1) * plane].iter_mut().zip(src) {
                *d = w * s;
            }
        }
    }
    Ok(out)
}

/// One training or evaluation sample at the degraded level.
#[derive(Clone, Debug)]
pub struct ImagePair<T = f32> {
    pub lrms: Tensor<T>,
    pub pan: Tensor<T>,
    pub hrms_gt: Option<Tensor<T>>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn ratio(&self) -> Result<usize> {
        let (_, _, lh, lw) = self.lrms.dims4()?;
        let (_, pc, ph, pw) = self.pan.dims4()?;
        if pc != 1 || lh == 0 || ph % lh != 0 || pw % lw != 0 || ph / lh != pw / lw {
            return shape_err(format!(
                "pan {:?} is not an integer upscale of lrms {:?}",
                self.pan.shape(),
                self.lrms.shape()
            ));
        }
        Ok(ph / lh)
    }
}

/// Reduces an (MS, PAN) acquisition one resolution level: both are blurred
/// and decimated by `r`, and the original MS becomes the ground truth.
pub fn wald_degrade<T: Scalar>(hrms: &Tensor<T>, pan: &Tensor<T>, spec: &DegradationSpec) -> Result<ImagePair<T>> {
    let (n, _, h, w) = hrms.dims4()?;
    let (pn, pc, ph, pw) = pan.dims4()?;
    if pn != n || pc != 1 || ph != h * spec.ratio || pw != w * spec.ratio {
        return shape_err(format!(
            "pan {:?} must be a single band at {}x the multispectral size {:?}",
            pan.shape(),
            spec.ratio,
            hrms.shape()
        ));
    }
    Ok(ImagePair {
        lrms: apply_blur_downsample(hrms, spec)?,
        pan: apply_blur_downsample(pan, spec)?,
        hrms_gt: Some(hrms.clone()),
    })
}

/// Divides a patch by its maximum. Returns the scaled patch and the divisor.
pub fn normalize<T: Scalar>(patch: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    let m = patch.max();
    if !(m > T::zero()) || !m.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot normalize a patch with maximum {m}"
        )));
    }
    Ok((patch.map(|v| v / m), m))
}

/// Synthetic full-resolution scene and its exact observations.
#[derive(Clone, Debug)]
pub struct Scene<T = f32> {
    pub hrms: Tensor<T>,
    pub pan: Tensor<T>,
    pub lrms: Tensor<T>,
}

fn box_blur_circular(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    // running window sums along rows, then columns
    let blur_line = |get: &dyn Fn(usize) -> f64, len: usize, out: &mut dyn FnMut(usize, f64)| {
        let norm = 1.0 / (2 * radius + 1) as f64;
        let at = |i: isize| get(i.rem_euclid(len as isize) as usize);
        let r = radius as isize;
        let mut s: f64 = (-r..=r).map(at).sum();
        for i in 0..len as isize {
            out(i as usize, s * norm);
            s += at(i + r + 1) - at(i - r);
        }
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        blur_line(&|x| src[y * w + x], w, &mut |x, v| tmp[y * w + x] = v);
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        blur_line(&|y| tmp[y * w + x], h, &mut |y, v| out[y * w + x] = v);
    }
    out
}

/// Zero-mean, unit-peak smooth random field built from blurred white noise
/// at a few scales.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, base_radius: usize) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for (octave, amp) in [(1usize, 1.0f64), (2, 0.6), (4, 0.35)] {
        let radius = (base_radius / octave).max(1);
        let mut noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..3 {
            noise = box_blur_circular(&noise, h, w, radius);
        }
        let peak = noise.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
        for (f, v) in field.iter_mut().zip(&noise) {
            *f += amp * v / peak;
        }
    }
    let peak = field.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
    field.iter_mut().for_each(|v| *v /= peak);
    field
}

/// Generates a deterministic multispectral scene: smooth band-correlated
/// background, textured detail and rectangles/disks with random spectral
/// signatures, clipped to `[0, 1]`. PAN and LRMS follow exactly from `spec`.
pub fn synthesize_scene<T: Scalar>(
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
    spec: &DegradationSpec,
) -> Result<Scene<T>> {
    spec.check_divisible(height, width)?;
    if bands != spec.bands() {
        return shape_err(format!(
            "scene has {bands} bands but the spectral response has {}",
            spec.bands()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let base_radius = (h.min(w) / 8).max(2);

    let shared = smooth_field(&mut rng, h, w, base_radius);
    let texture = smooth_field(&mut rng, h, w, 1);
    let mut img = vec![0.0f64; bands * h * w];
    for b in 0..bands {
        let own = smooth_field(&mut rng, h, w, base_radius);
        let mix: f64 = rng.gen_range(0.55..0.9);
        let level: f64 = rng.gen_range(0.3..0.55);
        let contrast: f64 = rng.gen_range(0.15..0.3);
        let tex_gain: f64 = rng.gen_range(0.04..0.08);
        for i in 0..h * w {
            img[b * h * w + i] =
                level + contrast * (mix * shared[i] + (1.0 - mix) * own[i]) + tex_gain * texture[i];
        }
    }

    let objects = rng.gen_range(6..14);
    for _ in 0..objects {
        let base: f64 = rng.gen_range(0.15..0.85);
        let signature: Vec<f64> = (0..bands)
            .map(|_| (base + rng.gen_range(-0.2..0.2)).clamp(0.02, 0.98))
            .collect();
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sy = rng.gen_range(0.03..0.2) * h as f64;
        let sx = rng.gen_range(0.03..0.2) * w as f64;
        let disk = rng.gen_bool(0.5);
        let opacity: f64 = rng.gen_range(0.6..1.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / sy, (x as f64 + 0.5 - cx) / sx);
                let inside = if disk {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (b, &s) in signature.iter().enumerate() {
                        let v = &mut img[b * h * w + y * w + x];
                        *v = (1.0 - opacity) * *v + opacity * s;
                    }
                }
            }
        }
    }

    let hrms = Tensor::new(
        vec![1, bands, h, w],
        img.into_iter().map(|v| T::of(v.clamp(0.0, 1.0))).collect(),
    )?;
    let pan = apply_spectral_response(&hrms, spec)?;
    let lrms = apply_blur_downsample(&hrms, spec)?;
    Ok(Scene { hrms, pan, lrms })
}
