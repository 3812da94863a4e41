//! Classical gradient projection for the LRMS-aware and PAN-aware
//! subproblems, using the exact observation operators.
//!
//! With `f(H) = ½‖L − DKH‖²` and `g(H) = ½‖P − HS‖²` the updates are
//! `H⁺ = prox(H − ρ∇f(H))` and `H⁺ = prox(H − ρ∇g(H))`. The step functions
//! below follow the four-stage split (simulate, residual, back-project,
//! proximal) literally so that they mirror the network blocks.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::image_ops::{bicubic_resize, Scale};
use crate::observation::{
    apply_blur_downsample, apply_spectral_response, blur_downsample_adjoint, spectral_adjoint,
    DegradationSpec,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prox {
    Identity,
    NonnegClip,
}

impl Prox {
    pub fn apply<T: Scalar>(self, h: Tensor<T>) -> Tensor<T> {
        match self {
            Prox::Identity => h,
            Prox::NonnegClip => h.map(|v| v.max(T::zero())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub rho: f64,
    pub iterations: usize,
    pub prox: Prox,
    pub spec: DegradationSpec,
}

impl GpConfig {
    pub fn new(rho: f64, iterations: usize, prox: Prox, spec: DegradationSpec) -> Result<Self> {
        let cfg = GpConfig {
            rho,
            iterations,
            prox,
            spec,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return arg_err(format!("step size rho must be finite and nonnegative, got {}", self.rho));
        }
        self.spec.validate()
    }
}

fn check_ms<T: Scalar>(h: &Tensor<T>, lrms: &Tensor<T>, spec: &DegradationSpec) -> Result<(usize, usize)> {
    let (n, c, hh, ww) = h.dims4()?;
    let (ln, lc, lh, lw) = lrms.dims4()?;
    if (n, c, hh, ww) != (ln, lc, lh * spec.ratio, lw * spec.ratio) {
        return shape_err(format!(
            "image {:?} and lrms {:?} are inconsistent with ratio {}",
            h.shape(),
            lrms.shape(),
            spec.ratio
        ));
    }
    Ok((hh, ww))
}

fn check_pan<T: Scalar>(h: &Tensor<T>, pan: &Tensor<T>) -> Result<()> {
    let (n, _, hh, ww) = h.dims4()?;
    if pan.shape() != [n, 1, hh, ww] {
        return shape_err(format!(
            "pan {:?} must be a single band matching image {:?}",
            pan.shape(),
            h.shape()
        ));
    }
    Ok(())
}

/// `∇f(H) = −(DK)ᵀ(L − DKH)`.
pub fn grad_f<T: Scalar>(h: &Tensor<T>, lrms: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    let (hh, ww) = check_ms(h, lrms, spec)?;
    let resid = lrms.sub(&apply_blur_downsample(h, spec)?)?;
    Ok(blur_downsample_adjoint(&resid, spec, hh, ww)?.scale(-T::one()))
}

/// `∇g(H) = −(P − HS)Sᵀ`.
pub fn grad_g<T: Scalar>(h: &Tensor<T>, pan: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    check_pan(h, pan)?;
    let resid = pan.sub(&apply_spectral_response(h, spec)?)?;
    Ok(spectral_adjoint(&resid, spec)?.scale(-T::one()))
}

/// `½‖L − DKH‖²`.
pub fn fidelity_f<T: Scalar>(h: &Tensor<T>, lrms: &Tensor<T>, spec: &DegradationSpec) -> Result<f64> {
    check_ms(h, lrms, spec)?;
    let r = lrms.sub(&apply_blur_downsample(h, spec)?)?;
    Ok(0.5 * r.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
}

/// `½‖P − HS‖²`.
pub fn fidelity_g<T: Scalar>(h: &Tensor<T>, pan: &Tensor<T>, spec: &DegradationSpec) -> Result<f64> {
    check_pan(h, pan)?;
    let r = pan.sub(&apply_spectral_response(h, spec)?)?;
    Ok(0.5 * r.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
}

/// One LRMS-aware step: `L̂ = DKH`, `R_l = L − L̂`, `R_h = ρ(DK)ᵀR_l`,
/// `H⁺ = prox(H + R_h)`.
pub fn gp_step_ms<T: Scalar>(h: &Tensor<T>, lrms: &Tensor<T>, cfg: &GpConfig) -> Result<Tensor<T>> {
    let (hh, ww) = check_ms(h, lrms, &cfg.spec)?;
    let l_hat = apply_blur_downsample(h, &cfg.spec)?;
    let r_l = lrms.sub(&l_hat)?;
    let r_h = blur_downsample_adjoint(&r_l, &cfg.spec, hh, ww)?.scale(T::of(cfg.rho));
    Ok(cfg.prox.apply(h.add(&r_h)?))
}

/// One PAN-aware step: `P̂ = HS`, `R_p = P − P̂`, `R_h = ρR_pSᵀ`,
/// `H⁺ = prox(H + R_h)`.
pub fn gp_step_pan<T: Scalar>(h: &Tensor<T>, pan: &Tensor<T>, cfg: &GpConfig) -> Result<Tensor<T>> {
    check_pan(h, pan)?;
    let p_hat = apply_spectral_response(h, &cfg.spec)?;
    let r_p = pan.sub(&p_hat)?;
    let r_h = spectral_adjoint(&r_p, &cfg.spec)?.scale(T::of(cfg.rho));
    Ok(cfg.prox.apply(h.add(&r_h)?))
}

/// Gradient step on `f + g` with a single proximal map.
pub fn fused_gp_step<T: Scalar>(
    h: &Tensor<T>,
    lrms: &Tensor<T>,
    pan: &Tensor<T>,
    cfg: &GpConfig,
) -> Result<Tensor<T>> {
    let total = grad_f(h, lrms, &cfg.spec)?.add(&grad_g(h, pan, &cfg.spec)?)?;
    let mut next = h.clone();
    next.axpy(-T::of(cfg.rho), &total)?;
    Ok(cfg.prox.apply(next))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityRecord {
    pub iteration: usize,
    pub f: f64,
    pub g: f64,
}

impl FidelityRecord {
    pub fn total(&self) -> f64 {
        self.f + self.g
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult<T> {
    pub image: Tensor<T>,
    /// Entry 0 is the bicubic initialization, entry `t` follows round `t`.
    pub trace: Vec<FidelityRecord>,
}

/// Growth of `f + g` over its initial value that is treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Alternates MS and PAN steps for `cfg.iterations` rounds starting from
/// the bicubic upsampling of `lrms`.
pub fn solve<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, cfg: &GpConfig) -> Result<SolveResult<T>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return arg_err("solve needs at least one iteration");
    }
    let mut h = bicubic_resize(lrms, Scale::Up(cfg.spec.ratio))?;
    check_pan(&h, pan)?;
    let record = |h: &Tensor<T>, iteration| -> Result<FidelityRecord> {
        Ok(FidelityRecord {
            iteration,
            f: fidelity_f(h, lrms, &cfg.spec)?,
            g: fidelity_g(h, pan, &cfg.spec)?,
        })
    };
    let first = record(&h, 0)?;
    let mut trace = vec![first];
    for it in 1..=cfg.iterations {
        h = gp_step_ms(&h, lrms, cfg)?;
        h = gp_step_pan(&h, pan, cfg)?;
        let rec = record(&h, it)?;
        if !rec.total().is_finite()
            || (rec.total() > DIVERGENCE_FACTOR * first.total() && rec.total() > 1e-12)
        {
            return Err(Error::Divergence {
                iteration: it,
                value: rec.total(),
                initial: first.total(),
            });
        }
        trace.push(rec);
    }
    Ok(SolveResult { image: h, trace })
}
