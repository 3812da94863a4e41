//! Hand-set weights under which the blocks reduce to exact gradient steps.
//!
//! A conv block `conv(relu(conv(x)))` can carry any linear map exactly, even
//! on signed inputs, by lifting to `[y, −y]`, letting the ReLU split the
//! positive and negative parts and recombining them with `+1, −1`.

use super::{Ablation, ConvBlockWeights, GppnnWeights, LayerIdx, NetworkConfig, PAN_BANDS};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

fn kernel_dims<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *a.shape() {
        [o, i, k, k2] if k == k2 && k % 2 == 1 => Ok((o, i, k)),
        ref s => shape_err(format!("expected an odd square o×i×k×k kernel, got {s:?}")),
    }
}

/// Kernel of the given shape that is zero except for center taps
/// `(out, in, value)`.
fn center_taps<T: Scalar>(shape: [usize; 4], pairs: impl Iterator<Item = (usize, usize, f64)>) -> Tensor<T> {
    let mut t = Tensor::zeros(shape.to_vec());
    let (cols, k) = (shape[1], shape[2]);
    let c = k / 2;
    for (o, i, v) in pairs {
        t.data_mut()[((o * cols + i) * k + c) * k + c] = T::of(v);
    }
    t
}

/// Conv block equal to the linear convolution `a` (`o × i × k × k`): the
/// first conv computes `[a·x, −a·x]`, the second (kernel `k2`, center tap
/// only) recombines them. Needs `width ≥ 2o`.
pub fn linear_first_block<T: Scalar>(a: &Tensor<T>, width: usize, k2: usize) -> Result<ConvBlockWeights<T>> {
    let (o, i, k) = kernel_dims(a)?;
    if width < 2 * o {
        return arg_err(format!("signed lift of {o} channels needs width ≥ {}, got {width}", 2 * o));
    }
    let mut w1 = Tensor::zeros(vec![width, i, k, k]);
    let plane = i * k * k;
    w1.data_mut()[..o * plane].copy_from_slice(a.data());
    for (d, s) in w1.data_mut()[o * plane..2 * o * plane].iter_mut().zip(a.data()) {
        *d = -*s;
    }
    let w2 = center_taps([o, width, k2, k2], (0..o).flat_map(|j| [(j, j, 1.0), (j, o + j, -1.0)]));
    Ok(ConvBlockWeights {
        w1,
        b1: Tensor::zeros(vec![width]),
        w2,
        b2: Tensor::zeros(vec![o]),
    })
}

/// Conv block equal to the linear convolution `a` applied in the second
/// conv, after a `[x, −x]` lift by the first (kernel `k1`, center tap only).
/// Needs `width ≥ 2i`.
pub fn linear_second_block<T: Scalar>(a: &Tensor<T>, width: usize, k1: usize) -> Result<ConvBlockWeights<T>> {
    let (o, i, k) = kernel_dims(a)?;
    if width < 2 * i {
        return arg_err(format!("signed lift of {i} channels needs width ≥ {}, got {width}", 2 * i));
    }
    let w1 = center_taps([width, i, k1, k1], (0..i).flat_map(|j| [(j, j, 1.0), (i + j, j, -1.0)]));
    let mut w2 = Tensor::zeros(vec![o, width, k, k]);
    let kk = k * k;
    for oo in 0..o {
        for ii in 0..i {
            let src = &a.data()[(oo * i + ii) * kk..(oo * i + ii + 1) * kk];
            let pos = (oo * width + ii) * kk;
            let neg = (oo * width + i + ii) * kk;
            w2.data_mut()[pos..pos + kk].copy_from_slice(src);
            for (d, s) in w2.data_mut()[neg..neg + kk].iter_mut().zip(src) {
                *d = -*s;
            }
        }
    }
    Ok(ConvBlockWeights {
        w1,
        b1: Tensor::zeros(vec![width]),
        w2,
        b2: Tensor::zeros(vec![o]),
    })
}

/// Conv block that returns its input unchanged.
pub fn identity_block<T: Scalar>(channels: usize, width: usize, k: usize) -> Result<ConvBlockWeights<T>> {
    let eye = center_taps([channels, channels, k, k], (0..channels).map(|j| (j, j, 1.0)));
    linear_first_block(&eye, width, k)
}

/// Parameters of the gradient-step construction.
#[derive(Clone, Debug)]
pub struct AnalyticWeights {
    /// `k_lr × k_lr` blur kernel applied to every band.
    pub blur: Vec<f64>,
    /// Spectral response, one weight per band.
    pub spectral: Vec<f64>,
    pub rho_ms: f64,
    pub rho_pan: f64,
}

impl AnalyticWeights {
    /// Weights under which the MS block computes
    /// `h + ρ_ms·bicubic↑(flip(blur) ⋆ (lrms − bicubic↓(blur ⋆ h)))`, the PAN
    /// block `h + ρ_pan·(pan − hS)Sᵀ`, and every proximal block is the
    /// identity. A fused-block network uses `rho_ms` for its single step.
    /// Needs `width ≥ 2·bands`.
    pub fn build<T: Scalar>(&self, cfg: &NetworkConfig) -> Result<GppnnWeights<T>> {
        let (b, c, k) = (cfg.bands, cfg.width, cfg.k_lr);
        if self.blur.len() != k * k || self.spectral.len() != b {
            return shape_err(format!(
                "analytic weights need a {k}x{k} blur and {b} spectral weights, got {} and {}",
                self.blur.len(),
                self.spectral.len()
            ));
        }
        let diag = |kern: &dyn Fn(usize) -> f64| {
            Tensor::<T>::from_fn(vec![b, b, k, k], |idx| {
                let (o, i, tap) = (idx / (b * k * k), (idx / (k * k)) % b, idx % (k * k));
                if o == i {
                    T::of(kern(tap))
                } else {
                    T::zero()
                }
            })
        };
        let blur = diag(&|t| self.blur[t]);
        let flipped = diag(&|t| self.blur[k * k - 1 - t]);
        let s = Tensor::<T>::from_fn(vec![PAN_BANDS, b, 1, 1], |i| T::of(self.spectral[i]));
        let st = Tensor::<T>::from_fn(vec![b, PAN_BANDS, 1, 1], |i| T::of(self.spectral[i]));

        let down = linear_first_block(&blur, c, k)?;
        let up = linear_second_block(&flipped, c, k)?;
        let reduce = linear_first_block(&s, c, 1)?;
        let expand = linear_second_block(&st, c, 1)?;
        let prox = identity_block(b, c, k)?;

        let mut w = GppnnWeights::zeros(cfg)?;
        let tied = cfg.ablation == Ablation::TransposedKernels;
        for t in 0..w.layout.layers.len() {
            let (ms, pan, ms_prox) = match w.layout.layers[t] {
                LayerIdx::Split { ms, .. } => (
                    format!("layer{t}.ms"),
                    Some(format!("layer{t}.pan")),
                    ms.prox.is_some(),
                ),
                LayerIdx::Fused(_) => (format!("layer{t}.fused"), None, true),
            };
            w.set_block(&format!("{ms}.down"), down.clone())?;
            if !tied {
                w.set_block(&format!("{ms}.up"), up.clone())?;
            }
            w.set_rho(&format!("{ms}.rho"), self.rho_ms)?;
            let pan_pre = pan.clone().unwrap_or_else(|| ms.clone());
            w.set_block(&format!("{pan_pre}.reduce"), reduce.clone())?;
            w.set_block(&format!("{pan_pre}.expand"), expand.clone())?;
            if ms_prox {
                w.set_block(&format!("{ms}.prox"), prox.clone())?;
            }
            if let Some(pan) = pan {
                w.set_rho(&format!("{pan}.rho"), self.rho_pan)?;
                if cfg.ablation != Ablation::NoProx {
                    w.set_block(&format!("{pan}.prox"), prox.clone())?;
                }
            }
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::{conv_block, conv2d_raw, ConvKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(b: &ConvBlockWeights<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let k1 = ConvKernel::new(b.w1.clone(), b.b1.clone()).unwrap();
        let k2 = ConvKernel::new(b.w2.clone(), b.b2.clone()).unwrap();
        conv_block(x, &k1, &k2).unwrap()
    }

    fn signed(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn lifted_blocks_reproduce_linear_convs_on_signed_input() {
        let x = signed(vec![2, 3, 7, 6], 1);
        let a = signed(vec![2, 3, 3, 3], 2);
        let direct = conv2d_raw(&x, &a, &Tensor::zeros(vec![2])).unwrap();
        let first = run(&linear_first_block(&a, 5, 3).unwrap(), &x);
        let second = run(&linear_second_block(&a, 7, 1).unwrap(), &x);
        assert!(first.max_abs_diff(&direct).unwrap() < 1e-12);
        assert!(second.max_abs_diff(&direct).unwrap() < 1e-12);
        let id = run(&identity_block(3, 6, 3).unwrap(), &x);
        assert!(id.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn lift_width_is_checked() {
        let a = Tensor::<f64>::zeros(vec![2, 3, 3, 3]);
        assert!(linear_first_block(&a, 3, 3).is_err());
        assert!(linear_second_block(&a, 5, 3).is_err());
        assert!(linear_first_block(&Tensor::<f64>::zeros(vec![2, 3, 2, 2]), 8, 3).is_err());
    }
}
