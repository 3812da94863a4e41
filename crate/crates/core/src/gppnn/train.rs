use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward, forward_graph, BoundWeights};
use super::{GppnnWeights, InitScheme, NetworkConfig, Normalization, TRAIN_RHO_INIT};
use crate::autodiff::Graph;
use crate::error::{arg_err, Error, Result};
use crate::metrics::{evaluate_set, MetricsReport};
use crate::observation::{normalize, ImagePair};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Side of the square training crops on the HR grid.
    pub patch: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_rho")]
    pub rho_init: f64,
}

fn default_rho() -> f64 {
    TRAIN_RHO_INIT
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 5e-4,
            batch: 16,
            patch: 32,
            seed: 0,
            init: InitScheme::default(),
            rho_init: TRAIN_RHO_INIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean l1 loss over the epoch's training patches (normalized units).
    pub train_loss: f64,
    /// Mean validation PSNR, absent without a validation set.
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation PSNR (the last epoch
    /// when there is no validation set).
    pub weights: GppnnWeights<f32>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

/// A sample scaled for the network. MS inputs and ground truth are divided
/// by the LRMS maximum; PAN by the same value or by its own maximum.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub lrms: Tensor<f32>,
    pub pan: Tensor<f32>,
    pub gt: Option<Tensor<f32>>,
    pub ms_divisor: f32,
}

pub fn prepare_pair(pair: &ImagePair<f32>, mode: Normalization) -> Result<PreparedPair> {
    let (lrms, ms_divisor) = normalize(&pair.lrms)?;
    let pan = match mode {
        Normalization::Joint => pair.pan.scale(1.0 / ms_divisor),
        Normalization::PerModality => normalize(&pair.pan)?.0,
    };
    Ok(PreparedPair {
        lrms,
        pan,
        gt: pair.hrms_gt.as_ref().map(|g| g.scale(1.0 / ms_divisor)),
        ms_divisor,
    })
}

/// Non-overlapping `patch × patch` HR crops of a single-image pair, with the
/// matching `patch/r` LRMS crops. Leftover borders are dropped.
pub fn tile_patches(pair: &ImagePair<f32>, patch: usize) -> Result<Vec<ImagePair<f32>>> {
    let r = pair.ratio()?;
    if patch == 0 || patch % r != 0 {
        return arg_err(format!("patch size {patch} must be a positive multiple of the ratio {r}"));
    }
    let (_, _, h, w) = pair.pan.dims4()?;
    let lp = patch / r;
    let mut out = Vec::new();
    for ty in 0..h / patch {
        for tx in 0..w / patch {
            let (y, x) = (ty * patch, tx * patch);
            out.push(ImagePair {
                lrms: pair.lrms.crop(y / r, x / r, lp, lp)?,
                pan: pair.pan.crop(y, x, patch, patch)?,
                hrms_gt: pair.hrms_gt.as_ref().map(|g| g.crop(y, x, patch, patch)).transpose()?,
            });
        }
    }
    Ok(out)
}

/// Normalizes each sample, runs the network and maps the output back to the
/// input's scale, clipped to `[0, 1]`.
pub fn fuse(w: &GppnnWeights<f32>, lrms: &Tensor<f32>, pan: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, _, _, _) = lrms.dims4()?;
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let p = prepare_pair(&ImagePair {
            lrms: lrms.batch_slice(i, 1)?,
            pan: pan.batch_slice(i, 1)?,
            hrms_gt: None,
        }, w.config.normalization)?;
        let out = forward(&p.lrms, &p.pan, w)?;
        outs.push(out.scale(p.ms_divisor).clip(0.0, 1.0));
    }
    Tensor::stack_batch(&outs.iter().collect::<Vec<_>>())
}

/// Fuses every pair and averages the four metrics against ground truth.
pub fn evaluate(w: &GppnnWeights<f32>, pairs: &[ImagePair<f32>]) -> Result<MetricsReport> {
    let fused = pairs
        .iter()
        .map(|p| fuse(w, &p.lrms, &p.pan))
        .collect::<Result<Vec<_>>>()?;
    evaluate_set(pairs, &fused)
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&items.collect::<Vec<_>>())
}

/// Adam on the l1 loss over shuffled minibatches of training patches,
/// keeping the weights with the best validation PSNR.
pub fn train(
    train_set: &[ImagePair<f32>],
    val_set: &[ImagePair<f32>],
    net: &NetworkConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if tc.batch == 0 {
        return arg_err("batch size must be positive");
    }
    let mut patches = Vec::new();
    for pair in train_set {
        for p in tile_patches(pair, tc.patch)? {
            let prepared = prepare_pair(&p, net.normalization)?;
            if prepared.gt.is_none() {
                return arg_err("training pairs need ground truth");
            }
            patches.push(prepared);
        }
    }
    if patches.is_empty() {
        return arg_err(format!("no {0}x{0} training patches in the dataset", tc.patch));
    }

    let mut w = GppnnWeights::<f32>::init_with(net, tc.init, tc.rho_init)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(tc.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, GppnnWeights<f32>)> = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (bi, chunk) in order.chunks(tc.batch).enumerate() {
            let lrms = stack(chunk.iter().map(|&i| &patches[i].lrms))?;
            let pan = stack(chunk.iter().map(|&i| &patches[i].pan))?;
            let gt = stack(chunk.iter().filter_map(|&i| patches[i].gt.as_ref()))?;

            let mut g = Graph::new();
            let bound = BoundWeights::bind(&mut g, &w, true)?;
            let (l, p, t) = (g.input(lrms), g.input(pan), g.input(gt));
            let out = forward_graph(&mut g, &w, &bound, l, p)?;
            let loss = g.l1_loss(out, t)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {lv} at epoch {epoch}, batch {bi}; \
                     lower the learning rate or check the initialization"
                )));
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars
                .iter()
                .zip(&w.tensors)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(t)))
                .collect();
            let mut params: Vec<&mut Tensor<f32>> = w.tensors.iter_mut().collect();
            adam.step(&mut params, &grads.iter().collect::<Vec<_>>())?;
            total += lv * chunk.len() as f64;
        }
        let train_loss = total / patches.len() as f64;
        let val_psnr = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&w, val_set)?.psnr)
        };
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.6}, val psnr {}",
            tc.epochs,
            val_psnr.map_or("-".into(), |p| format!("{p:.4}"))
        );
        let score = val_psnr.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => score > *s || val_psnr.is_none(),
        };
        if improved {
            best = Some((score, epoch, w.clone()));
        }
        trace.push(EpochRecord {
            epoch,
            train_loss,
            val_psnr,
        });
    }
    let (_, best_epoch, weights) = best.unwrap_or((f64::NEG_INFINITY, 0, w));
    Ok(TrainOutcome {
        weights,
        best_epoch,
        trace,
    })
}
