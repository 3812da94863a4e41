use std::rc::Rc;

use super::{Ablation, BlockIdx, FusedIdx, GppnnWeights, LayerIdx, MsIdx, PanIdx, UpIdx, PAN_BANDS};
use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::image_ops::{ResizePlan, Scale};
use crate::tensor::{Scalar, Tensor};

/// Weights placed on a graph, one [`Var`] per tensor in layout order.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub vars: Vec<Var>,
}

impl BoundWeights {
    /// Adds every weight to `g`, as tracked parameters when `track` is set.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, w: &GppnnWeights<T>, track: bool) -> Result<Self> {
        w.check_consistent()?;
        let vars = w
            .tensors
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        Ok(BoundWeights { vars })
    }
}

/// Resampling plans between the LR and HR grids of one forward pass.
struct Plans<T> {
    down: Rc<ResizePlan<T>>,
    up: Rc<ResizePlan<T>>,
}

impl<T: Scalar> Plans<T> {
    fn new(lr: (usize, usize), r: usize) -> Result<Self> {
        Ok(Plans {
            down: Rc::new(ResizePlan::new(lr.0 * r, lr.1 * r, Scale::Down(r))?),
            up: Rc::new(ResizePlan::new(lr.0, lr.1, Scale::Up(r))?),
        })
    }
}

fn block<T: Scalar>(g: &mut Graph<T>, v: &[Var], b: BlockIdx, x: Var) -> Result<Var> {
    g.conv_block(x, v[b.w1], v[b.b1], v[b.w2], v[b.b2])
}

fn up_block<T: Scalar>(g: &mut Graph<T>, v: &[Var], down: BlockIdx, up: UpIdx, x: Var) -> Result<Var> {
    match up {
        UpIdx::Free(b) => block(g, v, b, x),
        UpIdx::Tied { b1, b2 } => {
            let w1 = g.flip_transpose(v[down.w2])?;
            let w2 = g.flip_transpose(v[down.w1])?;
            g.conv_block(x, w1, v[b1], w2, v[b2])
        }
    }
}

/// `bicubic↑(conv_block(lrms − bicubic↓(conv_block(h; down)); up))`.
fn ms_residual<T: Scalar>(
    g: &mut Graph<T>,
    v: &[Var],
    plans: &Plans<T>,
    (down, up): (BlockIdx, UpIdx),
    h: Var,
    lrms: Var,
) -> Result<Var> {
    let d = block(g, v, down, h)?;
    let l_hat = g.resize_with(d, plans.down.clone())?;
    let r_l = g.sub(lrms, l_hat)?;
    let u = up_block(g, v, down, up, r_l)?;
    g.resize_with(u, plans.up.clone())
}

/// `conv_block(pan − conv_block(h; reduce); expand)`.
fn pan_residual<T: Scalar>(
    g: &mut Graph<T>,
    v: &[Var],
    (reduce, expand): (BlockIdx, BlockIdx),
    h: Var,
    pan: Var,
) -> Result<Var> {
    let p_hat = block(g, v, reduce, h)?;
    let r_p = g.sub(pan, p_hat)?;
    block(g, v, expand, r_p)
}

fn finish<T: Scalar>(g: &mut Graph<T>, v: &[Var], prox: Option<BlockIdx>, x: Var) -> Result<Var> {
    match prox {
        Some(p) => block(g, v, p, x),
        None => Ok(x),
    }
}

fn ms_step<T: Scalar>(g: &mut Graph<T>, v: &[Var], plans: &Plans<T>, m: &MsIdx, h: Var, lrms: Var) -> Result<Var> {
    let r = ms_residual(g, v, plans, (m.down, m.up), h, lrms)?;
    let r = g.mul_scalar(r, v[m.rho])?;
    let s = g.add(h, r)?;
    finish(g, v, m.prox, s)
}

fn pan_step<T: Scalar>(g: &mut Graph<T>, v: &[Var], p: &PanIdx, h: Var, pan: Var) -> Result<Var> {
    let r = pan_residual(g, v, (p.reduce, p.expand), h, pan)?;
    let r = g.mul_scalar(r, v[p.rho])?;
    let s = g.add(h, r)?;
    finish(g, v, p.prox, s)
}

fn fused_step<T: Scalar>(
    g: &mut Graph<T>,
    v: &[Var],
    plans: &Plans<T>,
    f: &FusedIdx,
    h: Var,
    lrms: Var,
    pan: Var,
) -> Result<Var> {
    let rm = ms_residual(g, v, plans, (f.down, f.up), h, lrms)?;
    let rp = pan_residual(g, v, (f.reduce, f.expand), h, pan)?;
    let r = g.add(rm, rp)?;
    let r = g.mul_scalar(r, v[f.rho])?;
    let s = g.add(h, r)?;
    block(g, v, f.prox, s)
}

/// Validates `lrms`/`pan` against the config and returns the LR size.
fn check_inputs(w_bands: usize, r: usize, lrms: &[usize], pan: &[usize]) -> Result<(usize, usize)> {
    let (n, c, lh, lw) = match *lrms {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err(format!("lrms must be 4-d, got {lrms:?}")),
    };
    if c != w_bands {
        return shape_err(format!("lrms has {c} bands, network expects {w_bands}"));
    }
    if pan != [n, PAN_BANDS, lh * r, lw * r] {
        return shape_err(format!(
            "pan {pan:?} must be [{n}, {PAN_BANDS}, {}, {}] for lrms {lrms:?} at ratio {r}",
            lh * r,
            lw * r
        ));
    }
    Ok((lh, lw))
}

/// Records the full network on `g`: bicubic initialization followed by K
/// layers. Never sees ground truth.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &GppnnWeights<T>,
    bound: &BoundWeights,
    lrms: Var,
    pan: Var,
) -> Result<Var> {
    let cfg = &w.config;
    let lr = check_inputs(cfg.bands, cfg.ratio, g.value(lrms).shape(), g.value(pan).shape())?;
    if bound.vars.len() != w.tensors.len() {
        return arg_err("bound weights do not match the network");
    }
    let plans = Plans::new(lr, cfg.ratio)?;
    let v = &bound.vars;
    let mut h = g.resize_with(lrms, plans.up.clone())?;
    for t in 0..cfg.layers {
        let li = if cfg.ablation == Ablation::SharedWeights { 0 } else { t };
        h = match &w.layout.layers[li] {
            LayerIdx::Split { ms, pan: p } => {
                let half = ms_step(g, v, &plans, ms, h, lrms)?;
                pan_step(g, v, p, half, pan)?
            }
            LayerIdx::Fused(f) => fused_step(g, v, &plans, f, h, lrms, pan)?,
        };
    }
    Ok(h)
}

/// Runs the network on concrete tensors.
pub fn forward<T: Scalar>(lrms: &Tensor<T>, pan: &Tensor<T>, w: &GppnnWeights<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = BoundWeights::bind(&mut g, w, false)?;
    let (l, p) = (g.input(lrms.clone()), g.input(pan.clone()));
    let out = forward_graph(&mut g, w, &bound, l, p)?;
    Ok(g.value(out).clone())
}

fn split_layer<T: Scalar>(w: &GppnnWeights<T>, layer: usize) -> Result<(MsIdx, PanIdx)> {
    match w.layout.layers.get(layer) {
        Some(LayerIdx::Split { ms, pan }) => Ok((*ms, *pan)),
        Some(LayerIdx::Fused(_)) => arg_err("fused-block networks have no separate MS/PAN blocks"),
        None => arg_err(format!("layer {layer} out of range")),
    }
}

/// Records the MS block of weight set `layer` on `g`.
pub fn ms_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &GppnnWeights<T>,
    bound: &BoundWeights,
    layer: usize,
    h: Var,
    lrms: Var,
) -> Result<Var> {
    let (ms, _) = split_layer(w, layer)?;
    let lr = check_inputs(w.config.bands, w.config.ratio, g.value(lrms).shape(), &{
        let s = g.value(h).shape();
        [s[0], PAN_BANDS, s[2], s[3]]
    })?;
    let plans = Plans::new(lr, w.config.ratio)?;
    ms_step(g, &bound.vars, &plans, &ms, h, lrms)
}

/// Records the PAN block of weight set `layer` on `g`.
pub fn pan_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &GppnnWeights<T>,
    bound: &BoundWeights,
    layer: usize,
    h: Var,
    pan: Var,
) -> Result<Var> {
    let (_, p) = split_layer(w, layer)?;
    pan_step(g, &bound.vars, &p, h, pan)
}

/// One MS block of weight set `layer` applied to `h`.
pub fn ms_block_forward<T: Scalar>(
    h: &Tensor<T>,
    lrms: &Tensor<T>,
    w: &GppnnWeights<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = h.dims4()?;
    if c != w.config.bands {
        return shape_err(format!("h has {c} bands, network expects {}", w.config.bands));
    }
    let mut g = Graph::new();
    let bound = BoundWeights::bind(&mut g, w, false)?;
    let (hv, lv) = (g.input(h.clone()), g.input(lrms.clone()));
    let out = ms_block_graph(&mut g, w, &bound, layer, hv, lv)?;
    Ok(g.value(out).clone())
}

/// One PAN block of weight set `layer` applied to `h`.
pub fn pan_block_forward<T: Scalar>(
    h: &Tensor<T>,
    pan: &Tensor<T>,
    w: &GppnnWeights<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    let (n, c, hh, hw) = h.dims4()?;
    if c != w.config.bands || pan.shape() != [n, PAN_BANDS, hh, hw] {
        return shape_err(format!(
            "pan {:?} and h {:?} must share batch and spatial size",
            pan.shape(),
            h.shape()
        ));
    }
    let mut g = Graph::new();
    let bound = BoundWeights::bind(&mut g, w, false)?;
    let (hv, pv) = (g.input(h.clone()), g.input(pan.clone()));
    let out = pan_block_graph(&mut g, w, &bound, layer, hv, pv)?;
    Ok(g.value(out).clone())
}
