//! Straight-line references shared by the integration tests. Nothing here
//! calls into the network or image-op code paths.
#![allow(dead_code)]

use pansharp::gppnn::{AnalyticWeights, NetworkConfig};
use pansharp::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Plane = Vec<Vec<f64>>;

pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps `(index, weight)` of output `dst` when resampling `n` samples by `factor`.
pub fn taps(n: usize, dst: usize, factor: f64) -> Vec<(usize, f64)> {
    let src = (dst as f64 + 0.5) / factor - 0.5;
    let base = src.floor() as i64;
    (base - 1..=base + 2)
        .map(|i| (i.clamp(0, n as i64 - 1) as usize, cubic(src - i as f64)))
        .collect()
}

pub fn resample(p: &Plane, factor: f64) -> Plane {
    let (h, w) = (p.len(), p[0].len());
    let (oh, ow) = ((h as f64 * factor).round() as usize, (w as f64 * factor).round() as usize);
    let mut out = vec![vec![0.0; ow]; oh];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            for (iy, wy) in taps(h, y, factor) {
                for (ix, wx) in taps(w, x, factor) {
                    *v += wy * wx * p[iy][ix];
                }
            }
        }
    }
    out
}

/// Zero-padded "same" correlation with a square kernel.
pub fn correlate(p: &Plane, k: &[f64]) -> Plane {
    let ks = (k.len() as f64).sqrt() as usize;
    let r = (ks / 2) as i64;
    let (h, w) = (p.len() as i64, p[0].len() as i64);
    let mut out = vec![vec![0.0; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..ks as i64 {
                for dx in 0..ks as i64 {
                    let (sy, sx) = (y + dy - r, x + dx - r);
                    if sy >= 0 && sy < h && sx >= 0 && sx < w {
                        s += k[(dy * ks as i64 + dx) as usize] * p[sy as usize][sx as usize];
                    }
                }
            }
            out[y as usize][x as usize] = s;
        }
    }
    out
}

pub fn planes(t: &Tensor<f64>) -> Vec<Vec<Plane>> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    (0..n)
        .map(|i| {
            (0..c)
                .map(|b| {
                    (0..h)
                        .map(|y| (0..w).map(|x| t.data()[((i * c + b) * h + y) * w + x]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn tensor(p: &[Vec<Plane>]) -> Tensor<f64> {
    let (n, c, h, w) = (p.len(), p[0].len(), p[0][0].len(), p[0][0][0].len());
    let data = p.iter().flatten().flatten().flatten().copied().collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

/// `H + ρ·up(flip(K) ⋆ (L − down(K ⋆ H)))`, band by band.
pub fn ms_reference(h: &Tensor<f64>, lrms: &Tensor<f64>, a: &AnalyticWeights, r: usize) -> Tensor<f64> {
    let flipped: Vec<f64> = a.blur.iter().rev().copied().collect();
    let (hp, lp) = (planes(h), planes(lrms));
    let out: Vec<Vec<Plane>> = hp
        .iter()
        .zip(&lp)
        .map(|(hs, ls)| {
            hs.iter()
                .zip(ls)
                .map(|(hb, lb)| {
                    let est = resample(&correlate(hb, &a.blur), 1.0 / r as f64);
                    let res: Plane = lb
                        .iter()
                        .zip(&est)
                        .map(|(l, e)| l.iter().zip(e).map(|(x, y)| x - y).collect())
                        .collect();
                    let back = resample(&correlate(&res, &flipped), r as f64);
                    hb.iter()
                        .zip(&back)
                        .map(|(hr, br)| hr.iter().zip(br).map(|(x, y)| x + a.rho_ms * y).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    tensor(&out)
}

/// `H + ρ·(P − HS)Sᵀ`.
pub fn pan_reference(h: &Tensor<f64>, pan: &Tensor<f64>, a: &AnalyticWeights) -> Tensor<f64> {
    let (hp, pp) = (planes(h), planes(pan));
    let out: Vec<Vec<Plane>> = hp
        .iter()
        .zip(&pp)
        .map(|(hs, ps)| {
            let (hh, ww) = (hs[0].len(), hs[0][0].len());
            let mut res = vec![vec![0.0; ww]; hh];
            for y in 0..hh {
                for x in 0..ww {
                    let est: f64 = hs.iter().zip(&a.spectral).map(|(b, s)| s * b[y][x]).sum();
                    res[y][x] = ps[0][y][x] - est;
                }
            }
            hs.iter()
                .zip(&a.spectral)
                .map(|(b, s)| {
                    (0..hh)
                        .map(|y| (0..ww).map(|x| b[y][x] + a.rho_pan * res[y][x] * s).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    tensor(&out)
}

pub fn random_analytic(rng: &mut ChaCha8Rng, bands: usize) -> AnalyticWeights {
    let blur: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = blur.iter().sum();
    let spectral: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.1..1.0)).collect();
    let st: f64 = spectral.iter().sum();
    AnalyticWeights {
        blur: blur.iter().map(|v| v / total).collect(),
        spectral: spectral.iter().map(|v| v / st).collect(),
        rho_ms: rng.gen_range(0.1..1.0),
        rho_pan: rng.gen_range(0.1..1.0),
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

pub const BANDS: usize = 4;
pub const RATIO: usize = 4;

pub fn config(layers: usize) -> NetworkConfig {
    NetworkConfig::new(layers, 2 * BANDS, RATIO, BANDS).unwrap()
}

