//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome for one input of the checked function.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Denominator floor for the relative error so that near-zero gradients
/// are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Which elements of each input to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// Explicit `(input, element)` pairs.
    Elements(Vec<(usize, usize)>),
}

/// Compares the gradient of the scalar built by `f` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, input by input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_probe(f, inputs, eps, tol, &Probe::All)
}

pub fn finite_diff_check_probe<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    probe: &Probe,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_faulty(f, inputs, eps, tol, probe, None)
}

/// As [`finite_diff_check_probe`], with `fault` injected into the analytic
/// backward pass only.
pub fn finite_diff_check_faulty<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    probe: &Probe,
    fault: Option<Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zero(&g, v)).collect();

    let targets: Vec<(usize, usize)> = match probe {
        Probe::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, x)| (0..x.len()).map(move |e| (i, e)))
            .collect(),
        Probe::Elements(list) => list.clone(),
    };

    let mut checks: Vec<InputCheck> = (0..inputs.len())
        .map(|index| InputCheck {
            index,
            max_rel_err: 0.0,
            worst_element: 0,
        })
        .collect();
    let mut work = inputs.to_vec();
    for (i, e) in targets {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i].data()[e], numeric);
        if err > checks[i].max_rel_err || err.is_nan() {
            checks[i].max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            checks[i].worst_element = e;
        }
    }
    Ok(GradCheckReport {
        inputs: checks,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_away_from_kink_passes() {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(vec![20], |_| {
            let v: f64 = rng.gen_range(20.0 * eps..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let w = Tensor::from_fn(vec![20], |i| (i as f64 * 0.37).sin());
        let rep = finite_diff_check(
            |g, v| {
                let y = g.relu(v[0]);
                g.project(y, w.clone())
            },
            &[x],
            eps,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // f = sum(relu(x)) evaluated where the check must pass, then a
        // mismatched tolerance of zero must fail
        let x = Tensor::new(vec![2], vec![0.5, -0.7]).unwrap();
        let rep = finite_diff_check(|g, v| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        }, &[x], 1e-6, 0.0).unwrap();
        assert!(!rep.passed());
    }
}
