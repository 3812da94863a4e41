//! Classical fusion methods used as comparison rows.

use std::time::Instant;

use crate::error::{arg_err, shape_err, Result};
use crate::image_ops::{bicubic_resize, Scale};
use crate::tensor::{Scalar, Tensor};

/// Division guard for the multiplicative methods.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FusionResult<T = f32> {
    pub image: Tensor<T>,
    pub method: String,
    pub runtime_secs: f64,
}

impl<T: Scalar> FusionResult<T> {
    /// Times `f` and clips its output to `[0, 1]`.
    pub fn timed(method: &str, f: impl FnOnce() -> Result<Tensor<T>>) -> Result<Self> {
        let start = Instant::now();
        let image = f()?.clip(T::zero(), T::one());
        Ok(FusionResult {
            image,
            method: method.to_string(),
            runtime_secs: start.elapsed().as_secs_f64(),
        })
    }
}

fn upsampled<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let u = bicubic_resize(lrms, Scale::Up(r))?;
    let (n, _, h, w) = u.dims4()?;
    if pan.shape() != [n, 1, h, w] {
        return shape_err(format!(
            "pan {:?} does not match upsampled lrms {:?}",
            pan.shape(),
            u.shape()
        ));
    }
    Ok(u)
}

fn band_mean<T: Scalar>(u: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = u.dims4()?;
    let plane = h * w;
    let inv = T::of(1.0 / c as f64);
    Ok(Tensor::from_fn(vec![n, 1, h, w], |i| {
        let (b, px) = (i / plane, i % plane);
        (0..c).map(|ch| u.data()[(b * c + ch) * plane + px]).sum::<T>() * inv
    }))
}

/// Applies `f(band_value, pan, aux)` to every band, with `aux` a single-band
/// image aligned with `pan`.
fn per_band<T: Scalar>(
    u: &Tensor<T>,
    pan: &Tensor<T>,
    aux: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = u.dims4()?;
    let plane = h * w;
    Ok(Tensor::from_fn(vec![n, c, h, w], |i| {
        let px = i % plane;
        let b = i / (c * plane);
        let j = b * plane + px;
        f(u.data()[i], pan.data()[j], aux.data()[j])
    }))
}

/// Mean filter of odd `size`, averaging only the in-bounds pixels.
pub fn box_blur<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    if size % 2 == 0 {
        return arg_err(format!("box blur size must be odd, got {size}"));
    }
    let (n, c, h, w) = x.dims4()?;
    let rad = size / 2;
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        // summed-area table in f64
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += src[y * w + xx].as_f64();
                sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(rad), (y + rad + 1).min(h));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(rad), (xx + rad + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                dst[y * w + xx] = T::of(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

pub fn bicubic_baseline<T: Scalar>(lrms: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    bicubic_resize(lrms, Scale::Up(r))
}

/// Fast IHS: every band receives `pan − I` with `I` the band mean.
pub fn ihs_fuse<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = lrms.dims4()?;
    if c < 3 {
        return arg_err(format!("IHS needs at least 3 bands, got {c}"));
    }
    let u = upsampled(lrms, pan, r)?;
    let intensity = band_mean(&u)?;
    Ok(per_band(&u, pan, &intensity, |v, p, i| v + (p - i))?.clip(T::zero(), T::one()))
}

/// Brovey transform: `U_b · P / (mean_b U + ε)`.
pub fn brovey_fuse<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let u = upsampled(lrms, pan, r)?;
    let intensity = band_mean(&u)?;
    let eps = T::of(EPS);
    Ok(per_band(&u, pan, &intensity, |v, p, i| v * p / (i + eps))?.clip(T::zero(), T::one()))
}

/// High-pass injection: `U_b + (P − box(P, 2r+1))`.
pub fn hpf_fuse<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let u = upsampled(lrms, pan, r)?;
    let low = box_blur(pan, 2 * r + 1)?;
    Ok(per_band(&u, pan, &low, |v, p, l| v + (p - l))?.clip(T::zero(), T::one()))
}

/// Smoothing-filter intensity modulation: `U_b · P / (box(P, 2r+1) + ε)`.
pub fn sfim_fuse<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let u = upsampled(lrms, pan, r)?;
    let low = box_blur(pan, 2 * r + 1)?;
    let eps = T::of(EPS);
    Ok(per_band(&u, pan, &low, |v, p, l| v * p / (l + eps))?.clip(T::zero(), T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.1..0.9))
    }

    fn setup() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let lrms = random(vec![1, 4, 4, 4], 1);
        let pan = random(vec![1, 1, 16, 16], 2);
        let u = bicubic_resize(&lrms, Scale::Up(4)).unwrap();
        (lrms, pan, u)
    }

    /// Per-pixel mean of the band vector at `(y, x)`.
    fn mean_at(u: &Tensor<f64>, px: usize) -> f64 {
        (0..4).map(|b| u.data()[b * 256 + px]).sum::<f64>() / 4.0
    }

    /// Direct window average with in-bounds normalization.
    fn box_at(p: &Tensor<f64>, px: usize, rad: i64) -> f64 {
        let (y, x) = ((px / 16) as i64, (px % 16) as i64);
        let (mut s, mut n) = (0.0, 0.0);
        for yy in y - rad..=y + rad {
            for xx in x - rad..=x + rad {
                if (0..16).contains(&yy) && (0..16).contains(&xx) {
                    s += p.data()[(yy * 16 + xx) as usize];
                    n += 1.0;
                }
            }
        }
        s / n
    }

    #[test]
    fn bicubic_constant_and_shape() {
        let c = Tensor::<f64>::full(vec![1, 4, 3, 5], 0.4);
        let u = bicubic_baseline(&c, 4).unwrap();
        assert_eq!(u.shape(), &[1, 4, 12, 20]);
        assert!(u.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let (lrms, _, up) = setup();
        assert_eq!(bicubic_baseline(&lrms, 4).unwrap(), up);
    }

    #[test]
    fn ihs_examples() {
        let (lrms, pan, u) = setup();
        let intensity = band_mean(&u).unwrap();
        assert_eq!(ihs_fuse(&lrms, &intensity, 4).unwrap(), u.clip(0.0, 1.0));
        let out = ihs_fuse(&lrms, &pan, 4).unwrap();
        for i in [0usize, 77, 300, 1023] {
            let px = i % 256;
            let want = (u.data()[i] + pan.data()[px] - mean_at(&u, px)).clamp(0.0, 1.0);
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
        let flat = ihs_fuse(&Tensor::<f64>::full(vec![1, 3, 2, 2], 0.5), &Tensor::full(vec![1, 1, 8, 8], 0.5), 4).unwrap();
        assert!(flat.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(ihs_fuse(&Tensor::<f64>::zeros(vec![1, 2, 2, 2]), &Tensor::zeros(vec![1, 1, 8, 8]), 4).is_err());
    }

    #[test]
    fn brovey_examples() {
        let (lrms, pan, u) = setup();
        let intensity = band_mean(&u).unwrap();
        let same = brovey_fuse(&lrms, &intensity, 4).unwrap();
        assert!(same.max_abs_diff(&u.clip(0.0, 1.0)).unwrap() < 1e-4);
        let zero = brovey_fuse(&Tensor::zeros(vec![1, 4, 4, 4]), &pan, 4).unwrap();
        assert_eq!(zero.max(), 0.0);
        let out = brovey_fuse(&lrms, &pan, 4).unwrap();
        for i in [3usize, 500, 999] {
            let px = i % 256;
            let want = (u.data()[i] * pan.data()[px] / (mean_at(&u, px) + 1e-6)).clamp(0.0, 1.0);
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn hpf_examples() {
        let (lrms, pan, u) = setup();
        let flat = Tensor::full(vec![1, 1, 16, 16], 0.3);
        assert!(hpf_fuse(&lrms, &flat, 4).unwrap().max_abs_diff(&u.clip(0.0, 1.0)).unwrap() < 1e-12);
        let out = hpf_fuse(&lrms, &pan, 4).unwrap();
        assert_eq!(out.shape(), u.shape());
        for i in [0usize, 129, 700, 1023] {
            let px = i % 256;
            let want = (u.data()[i] + pan.data()[px] - box_at(&pan, px, 4)).clamp(0.0, 1.0);
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sfim_examples() {
        let (lrms, pan, u) = setup();
        let flat = Tensor::full(vec![1, 1, 16, 16], 0.3);
        assert!(sfim_fuse(&lrms, &flat, 4).unwrap().max_abs_diff(&u.clip(0.0, 1.0)).unwrap() < 1e-5);
        let zero = sfim_fuse(&lrms, &Tensor::zeros(vec![1, 1, 16, 16]), 4).unwrap();
        assert_eq!(zero.max(), 0.0);
        let out = sfim_fuse(&lrms, &pan, 4).unwrap();
        for i in [5usize, 255, 612] {
            let px = i % 256;
            let want = (u.data()[i] * pan.data()[px] / (box_at(&pan, px, 4) + 1e-6)).clamp(0.0, 1.0);
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_clipped() {
        let (lrms, pan, _) = setup();
        let big = pan.scale(3.0);
        for out in [
            ihs_fuse(&lrms, &big, 4).unwrap(),
            brovey_fuse(&lrms, &big, 4).unwrap(),
            hpf_fuse(&lrms, &big, 4).unwrap(),
            sfim_fuse(&lrms, &big, 4).unwrap(),
        ] {
            assert!(out.min() >= 0.0 && out.max() <= 1.0);
        }
    }
}
