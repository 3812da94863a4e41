//! Finite-difference checks for every differentiable operation, in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, Var};
use crate::error::Result;
use crate::gppnn::{forward_graph, ms_block_graph, pan_block_graph, Ablation, BoundWeights, GppnnWeights, NetworkConfig};
use crate::gradcheck::{finite_diff_check_faulty, GradCheckReport, Probe};
use crate::image_ops::Scale;
use crate::tensor::Tensor;

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end network loss.
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<Fault>,
    entries: Vec<SuiteEntry>,
}

impl Ctx {
    fn uniform(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Values with magnitude in `[0.05, 1)` and random sign.
    fn off_kink(&mut self, shape: Vec<usize>) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Checks `sum(w ⊙ f(inputs))` for a fixed random `w`.
    fn check<F>(&mut self, op: &str, inputs: Vec<Tensor<f64>>, out_shape: Vec<usize>, probe: Probe, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let w = self.uniform(out_shape, -1.0, 1.0);
        let report = finite_diff_check_faulty(
            |g, v| {
                let y = f(g, v)?;
                g.project(y, w.clone())
            },
            &inputs,
            STEP,
            OP_TOLERANCE,
            &probe,
            self.fault,
        )?;
        self.entries.push(SuiteEntry { op: op.into(), report });
        Ok(())
    }
}

fn small_net(ablation: Ablation, seed: u64) -> Result<GppnnWeights<f64>> {
    let mut cfg = NetworkConfig::new(1, 4, 2, 2)?.with_ablation(ablation).with_seed(seed);
    cfg.k_lr = 3;
    let mut w = GppnnWeights::<f64>::init(&cfg)?;
    // nonzero biases so that their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in w.layout.names.clone().iter().zip(w.tensors.iter_mut()) {
        if name.ends_with(".b1") || name.ends_with(".b2") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    Ok(w)
}

/// Runs every check with the given seed. `fault`, when set, is injected into
/// the analytic backward passes so that the suite can be shown to fail.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<SuiteEntry>> {
    let mut cx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        fault,
        entries: Vec::new(),
    };

    let x = cx.uniform(vec![2, 3, 6, 5], -1.0, 1.0);
    let w = cx.uniform(vec![4, 3, 3, 3], -1.0, 1.0);
    let b = cx.uniform(vec![4], -1.0, 1.0);
    cx.check("conv2d", vec![x, w, b], vec![2, 4, 6, 5], Probe::All, |g, v| g.conv2d(v[0], v[1], v[2]))?;

    let x = cx.off_kink(vec![1, 2, 5, 5]);
    cx.check("relu", vec![x], vec![1, 2, 5, 5], Probe::All, |g, v| Ok(g.relu(v[0])))?;

    let x = cx.uniform(vec![1, 2, 3, 4], -1.0, 1.0);
    cx.check("bicubic_up", vec![x], vec![1, 2, 12, 16], Probe::All, |g, v| {
        g.bicubic_resize(v[0], Scale::Up(4))
    })?;
    let x = cx.uniform(vec![1, 2, 8, 12], -1.0, 1.0);
    cx.check("bicubic_down", vec![x], vec![1, 2, 2, 3], Probe::All, |g, v| {
        g.bicubic_resize(v[0], Scale::Down(4))
    })?;

    let x = cx.uniform(vec![1, 2, 5, 5], -1.0, 1.0);
    let w1 = cx.uniform(vec![3, 2, 3, 3], -0.6, 0.6);
    let b1 = cx.uniform(vec![3], -0.2, 0.2);
    let w2 = cx.uniform(vec![2, 3, 3, 3], -0.6, 0.6);
    let b2 = cx.uniform(vec![2], -0.2, 0.2);
    cx.check("conv_block", vec![x, w1, b1, w2, b2], vec![1, 2, 5, 5], Probe::All, |g, v| {
        g.conv_block(v[0], v[1], v[2], v[3], v[4])
    })?;

    let w = cx.uniform(vec![3, 2, 3, 3], -1.0, 1.0);
    cx.check("flip_transpose", vec![w], vec![2, 3, 3, 3], Probe::All, |g, v| g.flip_transpose(v[0]))?;

    let a = cx.uniform(vec![2, 3], -1.0, 1.0);
    let b = cx.uniform(vec![2, 3], -1.0, 1.0);
    let s = cx.uniform(vec![1], 0.1, 1.0);
    cx.check("add_sub_scale", vec![a, b, s], vec![2, 3], Probe::All, |g, v| {
        let d = g.sub(v[0], v[1])?;
        let e = g.add(d, v[0])?;
        let e = g.scale(e, 0.7);
        g.mul_scalar(e, v[2])
    })?;

    // l1 with every difference bounded away from zero
    let p = cx.uniform(vec![3, 4], -1.0, 1.0);
    let offset = cx.off_kink(vec![3, 4]);
    let q = p.sub(&offset)?;
    cx.check("l1_loss", vec![p, q], vec![1], Probe::All, |g, v| g.l1_loss(v[0], v[1]))?;

    // blocks: gradients with respect to the state and every weight
    for (label, ablation) in [("ms_block", Ablation::None), ("ms_block_tied", Ablation::TransposedKernels)] {
        let net = small_net(ablation, seed)?;
        let h = cx.uniform(vec![1, 2, 8, 8], 0.0, 1.0);
        let l = cx.uniform(vec![1, 2, 4, 4], 0.0, 1.0);
        let mut inputs = vec![h];
        inputs.extend(net.tensors.iter().cloned());
        cx.check(label, inputs, vec![1, 2, 8, 8], Probe::All, |g, v| {
            let lv = g.input(l.clone());
            let bound = BoundWeights { vars: v[1..].to_vec() };
            ms_block_graph(g, &net, &bound, 0, v[0], lv)
        })?;
    }
    let net = small_net(Ablation::None, seed)?;
    let h = cx.uniform(vec![1, 2, 6, 6], 0.0, 1.0);
    let p = cx.uniform(vec![1, 1, 6, 6], 0.0, 1.0);
    let mut inputs = vec![h];
    inputs.extend(net.tensors.iter().cloned());
    cx.check("pan_block", inputs, vec![1, 2, 6, 6], Probe::All, |g, v| {
        let pv = g.input(p.clone());
        let bound = BoundWeights { vars: v[1..].to_vec() };
        pan_block_graph(g, &net, &bound, 0, v[0], pv)
    })?;

    cx.entries.push(network_check(&mut cx.rng, fault)?);
    Ok(cx.entries)
}

/// l1 loss of a K=1, C=4 network on an 8×8 scene against 20 random weights.
fn network_check(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<SuiteEntry> {
    let cfg = NetworkConfig::new(1, 4, 4, 4)?.with_seed(rng.gen());
    let net = GppnnWeights::<f64>::init(&cfg)?;
    let lrms = Tensor::from_fn(vec![1, 4, 2, 2], |_| rng.gen_range(0.1..1.0));
    let pan = Tensor::from_fn(vec![1, 1, 8, 8], |_| rng.gen_range(0.1..1.0));
    let out = crate::gppnn::forward(&lrms, &pan, &net)?;
    // target kept at least 0.05 from the output so the l1 kink is never crossed
    let target = Tensor::from_fn(out.shape().to_vec(), |i| {
        let d: f64 = rng.gen_range(0.05..0.5);
        if rng.gen_bool(0.5) {
            out.data()[i] + d
        } else {
            out.data()[i] - d
        }
    });
    let mut all: Vec<(usize, usize)> = net
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    all.shuffle(rng);
    all.truncate(20);
    let report = finite_diff_check_faulty(
        |g, v| {
            let (l, p, t) = (g.input(lrms.clone()), g.input(pan.clone()), g.input(target.clone()));
            let bound = BoundWeights { vars: v.to_vec() };
            let y = forward_graph(g, &net, &bound, l, p)?;
            g.l1_loss(y, t)
        },
        &net.tensors,
        STEP,
        NETWORK_TOLERANCE,
        &Probe::Elements(all),
        fault,
    )?;
    Ok(SuiteEntry {
        op: "network_k1".into(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for e in run_suite(11, None).unwrap() {
            assert!(e.passed(), "{} rel err {:e}", e.op, e.report.max_rel_err());
        }
    }

    #[test]
    fn negated_conv_backward_is_caught() {
        let entries = run_suite(11, Some(Fault::NegateConvInputGrad)).unwrap();
        let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.op.as_str()).collect();
        assert!(failed.contains(&"conv2d"), "{failed:?}");
        assert!(failed.contains(&"network_k1"), "{failed:?}");
        assert!(!failed.contains(&"relu"));
    }
}
