//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a tape, so node
//! indices are already a topological order. [`Graph::backward`] walks the
//! tape once in reverse, accumulating gradients into each node's inputs.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::image_ops::{self, ResizePlan, Scale};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    /// tensor times a learnable one-element scalar
    MulScalar(Var, Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var },
    Resize { x: Var, plan: Rc<ResizePlan<T>> },
    FlipTranspose(Var),
    Sum(Var),
    Project(Var, Tensor<T>),
    L1Loss(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Deliberate defects for checking that the gradient checker catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the convolution input gradient.
    NegateConvInputGrad,
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// A graph whose backward pass carries `fault`.
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(out, Op::Scale(a, s), t)
    }

    /// Multiplies tensor `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return shape_err(format!(
                "mul_scalar expects a one-element multiplier, got {:?}",
                self.value(s).shape()
            ));
        }
        let out = self.value(a).scale(self.value(s).item());
        let t = self.tracked(a) || self.tracked(s);
        Ok(self.push(out, Op::MulScalar(a, s), t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = image_ops::relu(self.value(a));
        let t = self.tracked(a);
        self.push(out, Op::Relu(a), t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        image_ops::check_kernel(self.value(w), self.value(b))?;
        let out = image_ops::conv2d_raw(self.value(x), self.value(w), self.value(b))?;
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(out, Op::Conv2d { x, w, b }, t))
    }

    /// `conv2d(relu(conv2d(x, w1, b1)), w2, b2)`.
    pub fn conv_block(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let (mid, expect) = (self.value(w1).shape()[0], self.value(w2).shape().get(1).copied());
        if expect != Some(mid) {
            return shape_err(format!(
                "conv block chain broken: first conv emits {mid} channels, second expects {:?}",
                expect
            ));
        }
        let h = self.conv2d(x, w1, b1)?;
        let h = self.relu(h);
        self.conv2d(h, w2, b2)
    }

    pub fn bicubic_resize(&mut self, x: Var, scale: Scale) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let plan = Rc::new(ResizePlan::new(h, w, scale)?);
        self.resize_with(x, plan)
    }

    /// Resize with a prebuilt plan, so repeated calls share tap tables.
    pub fn resize_with(&mut self, x: Var, plan: Rc<ResizePlan<T>>) -> Result<Var> {
        let out = plan.apply(self.value(x))?;
        let t = self.tracked(x);
        Ok(self.push(out, Op::Resize { x, plan }, t))
    }

    /// 180° rotation plus in/out swap of a conv kernel (tied adjoint weights).
    pub fn flip_transpose(&mut self, w: Var) -> Result<Var> {
        let out = image_ops::flip_transpose(self.value(w))?;
        let t = self.tracked(w);
        Ok(self.push(out, Op::FlipTranspose(w), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(out, Op::Sum(a), t)
    }

    /// `sum(a * weights)` with constant weights; scalarizes tensor outputs
    /// for gradient checks.
    pub fn project(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).dot(&weights)?);
        let t = self.tracked(a);
        Ok(self.push(out, Op::Project(a, weights), t))
    }

    /// Mean absolute error between prediction and target.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, q) = (self.value(pred), self.value(target));
        p.ensure_same_shape(q, "l1_loss operands differ")?;
        let total: T = p.data().iter().zip(q.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(total / T::of(p.len() as f64));
        let t = self.tracked(pred) || self.tracked(target);
        Ok(self.push(out, Op::L1Loss(pred, target), t))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| -> Result<()> {
            if !self.tracked(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                if self.tracked(*s) {
                    let ds = g.dot(self.value(*a))?;
                    acc(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?)?;
                }
                acc(*a, g.scale(sv))?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                acc(*a, d)?;
            }
            Op::Conv2d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.tracked(*x) {
                    let mut gx = image_ops::conv2d_input_grad(g, wv, xv.shape())?;
                    if self.fault == Some(Fault::NegateConvInputGrad) {
                        gx = gx.scale(-T::one());
                    }
                    acc(*x, gx)?;
                }
                if self.tracked(*w) || self.tracked(*b) {
                    let (gw, gb) = image_ops::conv2d_param_grad(xv, g, wv.shape())?;
                    acc(*w, gw)?;
                    acc(*b, gb)?;
                }
            }
            Op::Resize { x, plan } => acc(*x, plan.apply_transpose(g)?)?,
            // the map is a permutation whose inverse is itself
            Op::FlipTranspose(w) => acc(*w, image_ops::flip_transpose(g)?)?,
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::full(shape, g.item()))?;
            }
            Op::Project(a, w) => acc(*a, w.scale(g.item()))?,
            Op::L1Loss(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let scale = g.item() / T::of(pv.len() as f64);
                let sign = pv.zip_map(qv, |a, b| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                if self.tracked(*q) {
                    acc(*q, sign.scale(-T::one()))?;
                }
                acc(*p, sign)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, `None` when the leaf did not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is unreachable from the loss.
    pub fn get_or_zero(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(graph.value(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn add_example() {
        let mut g = Graph::new();
        let a = g.input(t(&[1.0, 2.0]));
        let b = g.input(t(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let d = g.input(t(&[1.0]));
        assert!(g.add(a, d).is_err());
    }

    #[test]
    fn l1_loss_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[0.3, -2.0, 5.0]));
        let l = g.l1_loss(x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let a = g.input(t(&[0.0, 0.0]));
        let b = g.input(t(&[1.0, -3.0]));
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn sum_of_scaled_param() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 1.0]));
        let y = g.scale(x, 2.0);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn l1_gradient_is_sign_over_count() {
        let mut g = Graph::new();
        let x = g.param(t(&[3.0, -3.0]));
        let z = g.input(t(&[0.0, 0.0]));
        let l = g.l1_loss(x, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        let y = g.input(t(&[1.0, 0.0]));
        let l = g.l1_loss(x, y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x - 3x) => grad -1
        let mut g = Graph::new();
        let x = g.param(t(&[0.5, -1.0]));
        let s = g.add(x, x).unwrap();
        let x3 = g.scale(x, 3.0);
        let d = g.sub(s, x3).unwrap();
        let l = g.sum(d);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0]));
        let y = g.param(t(&[2.0, 3.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zero(&g, y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mul_scalar_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0, 3.0]));
        let s = g.param(t(&[0.5]));
        let y = g.mul_scalar(x, s).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5]);
        assert!(g.mul_scalar(x, x).is_err());
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1.0]));
        let p = g.param(t(&[2.0]));
        let y = g.add(x, p).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }
}
