//! Full-reference quality metrics: PSNR, SSIM, SAM and ERGAS.
//!
//! All functions take `(fused, reference)` 4-d tensors with values on a
//! unit dynamic range and accumulate in `f64`.

use serde::Serialize;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::observation::ImagePair;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    x.ensure_same_shape(y, "metric operands differ")?;
    x.dims4()
}

/// `10·log10(1 / MSE)`; `+∞` when the images are identical.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(j, &kv)| kv * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, &kv)| kv * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), evaluated at
/// every window position fully inside the image and averaged over
/// positions, bands and batch entries.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = same_shape(x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return arg_err(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let xs: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let ys: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&xs, h, w, &k);
        let my = filter_valid(&ys, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

/// Pixels whose spectral vector norm is below this are skipped by SAM.
pub const SAM_MIN_NORM: f64 = 1e-8;

/// Mean spectral angle in radians over non-degenerate pixels.
pub fn sam<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = same_shape(x, y)?;
    if c < 2 {
        return arg_err(format!("sam needs at least two bands, got {c}"));
    }
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let (mut nx, mut ny) = (0.0, 0.0);
            for ch in 0..c {
                let a = x.data()[base + ch * plane + px].as_f64();
                let v = y.data()[base + ch * plane + px].as_f64();
                nx += a * a;
                ny += v * v;
            }
            let (nx, ny) = (nx.sqrt(), ny.sqrt());
            if nx < SAM_MIN_NORM || ny < SAM_MIN_NORM {
                continue;
            }
            // half-angle form stays accurate near 0 and π, unlike acos
            let (mut d2, mut s2) = (0.0, 0.0);
            for ch in 0..c {
                let a = x.data()[base + ch * plane + px].as_f64() / nx;
                let v = y.data()[base + ch * plane + px].as_f64() / ny;
                d2 += (a - v) * (a - v);
                s2 += (a + v) * (a + v);
            }
            total += 2.0 * d2.sqrt().atan2(s2.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sam undefined: every pixel has a near-zero spectral vector".into(),
        ));
    }
    Ok(total / count as f64)
}

/// `(100 / r)·sqrt(mean_b (RMSE_b / μ_b)²)` with `μ_b` the mean of reference
/// band `b`.
pub fn ergas<T: Scalar>(fused: &Tensor<T>, reference: &Tensor<T>, ratio: f64) -> Result<f64> {
    let (n, c, h, w) = same_shape(fused, reference)?;
    if !(ratio > 0.0) {
        return arg_err(format!("ergas ratio must be positive, got {ratio}"));
    }
    let plane = h * w;
    let mut acc = 0.0;
    for band in 0..c {
        let (mut se, mut sum) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + band) * plane;
            for i in off..off + plane {
                let (f, r) = (fused.data()[i].as_f64(), reference.data()[i].as_f64());
                se += (f - r).powi(2);
                sum += r;
            }
        }
        let count = (n * plane) as f64;
        let mu = sum / count;
        if mu <= 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "ergas undefined: reference band {band} has mean {mu:e}"
            )));
        }
        acc += se / count / (mu * mu);
    }
    Ok(100.0 / ratio * (acc / c as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub ergas: f64,
    pub n_images: usize,
    /// Images with infinite PSNR, left out of the PSNR mean.
    pub n_psnr_infinite: usize,
}

impl MetricsReport {
    pub fn for_image<T: Scalar>(fused: &Tensor<T>, reference: &Tensor<T>, ratio: usize) -> Result<Self> {
        let p = psnr(fused, reference)?;
        Ok(MetricsReport {
            psnr: p,
            ssim: ssim(fused, reference)?,
            sam: sam(fused, reference)?,
            ergas: ergas(fused, reference, ratio as f64)?,
            n_images: 1,
            n_psnr_infinite: usize::from(p.is_infinite()),
        })
    }

    /// Arithmetic mean of per-image reports.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return arg_err("cannot average an empty set of reports");
        }
        let n = reports.len() as f64;
        let finite: Vec<f64> = reports.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Ok(MetricsReport {
            psnr,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            sam: reports.iter().map(|r| r.sam).sum::<f64>() / n,
            ergas: reports.iter().map(|r| r.ergas).sum::<f64>() / n,
            n_images: reports.len(),
            n_psnr_infinite: reports.len() - finite.len(),
        })
    }
}

/// Formats a metric with four decimals; infinite PSNR prints as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Scores each fused image against its pair's ground truth and averages.
pub fn evaluate_set<T: Scalar>(pairs: &[ImagePair<T>], fused: &[Tensor<T>]) -> Result<MetricsReport> {
    if pairs.len() != fused.len() {
        return shape_err(format!(
            "{} pairs but {} fused images",
            pairs.len(),
            fused.len()
        ));
    }
    let reports = pairs
        .iter()
        .zip(fused)
        .map(|(pair, img)| {
            let gt = pair
                .hrms_gt
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("pair has no ground truth".into()))?;
            MetricsReport::for_image(img, gt, pair.ratio()?)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::average(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.05..1.0))
    }

    #[test]
    fn identical_images() {
        let x = random(vec![1, 3, 16, 16], 1);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sam(&x, &x).unwrap(), 0.0);
        assert_eq!(ergas(&x, &x, 4.0).unwrap(), 0.0);
        assert_eq!(fmt_metric(f64::INFINITY), "inf");
        assert_eq!(fmt_metric(38.99391), "38.9939");
    }

    #[test]
    fn psnr_of_known_mse() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let y = Tensor::full(vec![1, 1, 2, 2], 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros(vec![1, 1, 2, 3])).is_err());
    }

    #[test]
    fn ssim_of_inverted_image_is_below_one() {
        let x = random(vec![1, 1, 16, 16], 2);
        let y = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &y).unwrap() < 1.0);
        assert!(ssim(&Tensor::<f64>::zeros(vec![1, 1, 10, 16]), &Tensor::zeros(vec![1, 1, 10, 16])).is_err());
    }

    #[test]
    fn sam_orthogonal_and_degenerate() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let y = Tensor::<f64>::new(vec![1, 2, 1, 2], vec![0.0, 3.0, 1.0, 0.0]).unwrap();
        assert!((sam(&x, &y).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(vec![1, 2, 1, 2]);
        assert!(sam(&x, &z).is_err());
        assert!(sam(&Tensor::<f64>::zeros(vec![1, 1, 2, 2]), &Tensor::zeros(vec![1, 1, 2, 2])).is_err());
    }

    #[test]
    fn ergas_analytic_and_errors() {
        // one band, reference constant 0.5, fused off by 0.5 everywhere:
        // RMSE = mu, so ERGAS = 100 / r
        let reference = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.5);
        let fused = Tensor::full(vec![1, 1, 4, 4], 1.0);
        assert!((ergas(&fused, &reference, 4.0).unwrap() - 25.0).abs() < 1e-12);
        assert!(ergas(&fused, &Tensor::zeros(vec![1, 1, 4, 4]), 4.0).is_err());
    }

    #[test]
    fn symmetry_properties() {
        let x = random(vec![1, 4, 16, 16], 3);
        let y = random(vec![1, 4, 16, 16], 4);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        assert!((sam(&x, &y).unwrap() - sam(&y, &x).unwrap()).abs() < 1e-15);
        assert!((ergas(&x, &y, 4.0).unwrap() - ergas(&y, &x, 4.0).unwrap()).abs() > 1e-6);
        let e4 = ergas(&x, &y, 4.0).unwrap();
        assert!((ergas(&x, &y, 8.0).unwrap() - e4 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_monotonicity() {
        let gt = random(vec![1, 4, 24, 24], 5).map(|v| 0.2 + 0.6 * v);
        let noise = random(vec![1, 4, 24, 24], 6).map(|v| v - 0.5);
        let mut prev: Option<(f64, f64, f64, f64)> = None;
        for amp in [0.02, 0.05, 0.1] {
            let y = gt.add(&noise.scale(amp)).unwrap();
            let cur = (psnr(&y, &gt).unwrap(), ssim(&y, &gt).unwrap(), sam(&y, &gt).unwrap(), ergas(&y, &gt, 4.0).unwrap());
            if let Some(p) = prev {
                assert!(cur.0 < p.0 && cur.1 < p.1 && cur.2 > p.2 && cur.3 > p.3);
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn average_excludes_infinite_psnr() {
        let a = MetricsReport { psnr: 30.0, ssim: 0.9, sam: 0.1, ergas: 2.0, n_images: 1, n_psnr_infinite: 0 };
        let b = MetricsReport { psnr: f64::INFINITY, ssim: 1.0, sam: 0.0, ergas: 0.0, n_images: 1, n_psnr_infinite: 1 };
        let m = MetricsReport::average(&[a.clone(), b]).unwrap();
        assert_eq!(m.psnr, 30.0);
        assert_eq!(m.n_psnr_infinite, 1);
        assert!((m.ssim - 0.95).abs() < 1e-15);
        assert_eq!(MetricsReport::average(&[a.clone()]).unwrap(), a);
    }
}
