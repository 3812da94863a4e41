//! The unrolled gradient-projection network.
//!
//! Every layer is an MS block (a learned gradient step on the LRMS fidelity
//! followed by a learned proximal map) and a PAN block (the same for the PAN
//! fidelity). Weights are stored as one flat list of named tensors; a
//! [`Layout`] of indices into that list describes which tensor plays which
//! role, so optimizer order, checkpoint names and graph binding agree by
//! construction.

mod analytic;
mod checkpoint;
mod forward;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use analytic::{identity_block, linear_first_block, linear_second_block, AnalyticWeights};
pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE};
pub use forward::{
    forward, forward_graph, ms_block_forward, ms_block_graph, pan_block_forward, pan_block_graph, BoundWeights,
};
pub use train::{
    evaluate, fuse, prepare_pair, tile_patches, train, EpochRecord, PreparedPair, TrainConfig, TrainOutcome,
};

/// Architectural variant. `None` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Proximal blocks removed: each block returns `h + R_h`.
    NoProx,
    /// One MS block and one PAN block reused by all layers.
    SharedWeights,
    /// Each layer is a single block taking both residual branches from the
    /// same input and one shared proximal block.
    FusedBlock,
    /// Up-projection kernels tied to the 180°-rotated, transposed
    /// down-projection kernels.
    TransposedKernels,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoProx,
        Ablation::SharedWeights,
        Ablation::FusedBlock,
        Ablation::TransposedKernels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoProx => "no_prox",
            Ablation::SharedWeights => "shared_weights",
            Ablation::FusedBlock => "fused_block",
            Ablation::TransposedKernels => "transposed_kernels",
        }
    }

    fn has_prox(self) -> bool {
        self != Ablation::NoProx
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

/// How training initializes the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every kernel uniform in `[-1/√fan_in, 1/√fan_in]`.
    Uniform,
    /// As `Uniform` scaled by [`PROX_NOISE`] for proximal blocks, plus an
    /// exact identity carried by their first `2·bands` hidden channels.
    #[default]
    IdentityProx,
}

/// Scale of the random part of identity-initialized proximal blocks.
pub const PROX_NOISE: f64 = 0.1;

/// How a sample is scaled before entering the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// LRMS (and ground truth) divided by the LRMS maximum, PAN by its own.
    #[default]
    PerModality,
    /// Everything divided by the LRMS maximum, which keeps `P = HS`
    /// consistent between the inputs.
    Joint,
}

/// Full description of a GPPNN architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of unrolled layers K.
    pub layers: usize,
    /// Hidden channel count C of every conv block.
    pub width: usize,
    /// Kernel size of the MS-block and proximal convolutions.
    pub k_lr: usize,
    /// Kernel size of the PAN-block band mixing convolutions; always 1.
    pub k_pan: usize,
    pub ratio: usize,
    pub bands: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Channels of the PAN image.
pub const PAN_BANDS: usize = 1;

/// Initial value of every learnable step size under [`GppnnWeights::init`].
pub const RHO_INIT: f64 = 0.1;

/// Step size used by training unless configured otherwise.
pub const TRAIN_RHO_INIT: f64 = 1.0;

impl NetworkConfig {
    pub fn new(layers: usize, width: usize, ratio: usize, bands: usize) -> Result<Self> {
        let cfg = NetworkConfig {
            layers,
            width,
            k_lr: 3,
            k_pan: 1,
            ratio,
            bands,
            ablation: Ablation::None,
            seed: 0,
            normalization: Normalization::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// K = 8, C = 64.
    pub fn paper_scale(ratio: usize, bands: usize) -> Result<Self> {
        Self::new(8, 64, ratio, bands)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return arg_err(format!(
                "layers and width must be positive, got K={} C={}",
                self.layers, self.width
            ));
        }
        if self.k_pan != 1 {
            return arg_err(format!("k_pan must be 1, got {}", self.k_pan));
        }
        if self.k_lr % 2 == 0 {
            return arg_err(format!("k_lr must be odd, got {}", self.k_lr));
        }
        if self.ratio == 0 || self.bands == 0 {
            return arg_err("ratio and bands must be positive");
        }
        Ok(())
    }

    /// Number of distinct weight sets (1 when layers share weights).
    pub fn distinct_layers(&self) -> usize {
        if self.ablation == Ablation::SharedWeights {
            1
        } else {
            self.layers
        }
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (b, c, k, p) = (self.bands, self.width, self.k_lr, PAN_BANDS);
        let block = |i: usize, o: usize, k: usize| c * i * k * k + c + o * c * k * k + o;
        let prox = if self.ablation.has_prox() { block(b, b, k) } else { 0 };
        let up = if self.ablation == Ablation::TransposedKernels {
            c + b
        } else {
            block(b, b, k)
        };
        let ms = block(b, b, k) + up + prox + 1;
        let pan = block(b, p, 1) + block(p, b, 1) + prox + 1;
        let layer = match self.ablation {
            Ablation::FusedBlock => block(b, b, k) + up + block(b, p, 1) + block(p, b, 1) + prox + 1,
            _ => ms + pan,
        };
        layer * self.distinct_layers()
    }
}

/// Plain value form of a conv block: `conv(relu(conv(x, w1, b1)), w2, b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockWeights<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> ConvBlockWeights<T> {
    pub fn zeros(input: usize, width: usize, output: usize, k: usize) -> Self {
        ConvBlockWeights {
            w1: Tensor::zeros(vec![width, input, k, k]),
            b1: Tensor::zeros(vec![width]),
            w2: Tensor::zeros(vec![output, width, k, k]),
            b2: Tensor::zeros(vec![output]),
        }
    }
}

/// Indices of one conv block's tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// The up-projection of an MS block: free, or tied to the down block's
/// kernels with only its biases learnable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpIdx {
    Free(BlockIdx),
    Tied { b1: usize, b2: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsIdx {
    pub down: BlockIdx,
    pub up: UpIdx,
    pub prox: Option<BlockIdx>,
    pub rho: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PanIdx {
    pub reduce: BlockIdx,
    pub expand: BlockIdx,
    pub prox: Option<BlockIdx>,
    pub rho: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedIdx {
    pub down: BlockIdx,
    pub up: UpIdx,
    pub reduce: BlockIdx,
    pub expand: BlockIdx,
    pub prox: BlockIdx,
    pub rho: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerIdx {
    Split { ms: MsIdx, pan: PanIdx },
    Fused(FusedIdx),
}

/// Shape and role of every learnable tensor for a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    /// Fan-in used for initialization; `None` marks biases and step sizes.
    fan_in: Vec<Option<usize>>,
    is_rho: Vec<bool>,
    pub layers: Vec<LayerIdx>,
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            fan_in: Vec::new(),
            is_rho: Vec::new(),
            layers: Vec::new(),
        };
        let (b, c, k, p) = (cfg.bands, cfg.width, cfg.k_lr, PAN_BANDS);
        let prox = cfg.ablation.has_prox();
        let tied = cfg.ablation == Ablation::TransposedKernels;
        for t in 0..cfg.distinct_layers() {
            let layer = if cfg.ablation == Ablation::FusedBlock {
                let pre = format!("layer{t}.fused");
                LayerIdx::Fused(FusedIdx {
                    down: l.block(&format!("{pre}.down"), b, c, b, k),
                    up: l.up(&format!("{pre}.up"), b, c, k, tied),
                    reduce: l.block(&format!("{pre}.reduce"), b, c, p, 1),
                    expand: l.block(&format!("{pre}.expand"), p, c, b, 1),
                    prox: l.block(&format!("{pre}.prox"), b, c, b, k),
                    rho: l.rho(&format!("{pre}.rho")),
                })
            } else {
                let ms = format!("layer{t}.ms");
                let ms = MsIdx {
                    down: l.block(&format!("{ms}.down"), b, c, b, k),
                    up: l.up(&format!("{ms}.up"), b, c, k, tied),
                    prox: prox.then(|| l.block(&format!("{ms}.prox"), b, c, b, k)),
                    rho: l.rho(&format!("{ms}.rho")),
                };
                let pan = format!("layer{t}.pan");
                let pan = PanIdx {
                    reduce: l.block(&format!("{pan}.reduce"), b, c, p, 1),
                    expand: l.block(&format!("{pan}.expand"), p, c, b, 1),
                    prox: prox.then(|| l.block(&format!("{pan}.prox"), b, c, b, k)),
                    rho: l.rho(&format!("{pan}.rho")),
                };
                LayerIdx::Split { ms, pan }
            };
            l.layers.push(layer);
        }
        Ok(l)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>, is_rho: bool) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.is_rho.push(is_rho);
        self.names.len() - 1
    }

    fn block(&mut self, pre: &str, i: usize, c: usize, o: usize, k: usize) -> BlockIdx {
        BlockIdx {
            w1: self.push(format!("{pre}.w1"), vec![c, i, k, k], Some(i * k * k), false),
            b1: self.push(format!("{pre}.b1"), vec![c], None, false),
            w2: self.push(format!("{pre}.w2"), vec![o, c, k, k], Some(c * k * k), false),
            b2: self.push(format!("{pre}.b2"), vec![o], None, false),
        }
    }

    fn up(&mut self, pre: &str, b: usize, c: usize, k: usize, tied: bool) -> UpIdx {
        if tied {
            UpIdx::Tied {
                b1: self.push(format!("{pre}.b1"), vec![c], None, false),
                b2: self.push(format!("{pre}.b2"), vec![b], None, false),
            }
        } else {
            UpIdx::Free(self.block(pre, b, c, b, k))
        }
    }

    fn rho(&mut self, name: &str) -> usize {
        self.push(name.to_string(), vec![1], None, true)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Learnable tensors of a GPPNN plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct GppnnWeights<T = f32> {
    pub config: NetworkConfig,
    pub layout: Layout,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> GppnnWeights<T> {
    /// All convs zero, every rho at its initial value.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        let layout = Layout::new(cfg)?;
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.is_rho)
            .map(|(s, &rho)| {
                Tensor::full(s.clone(), if rho { T::of(RHO_INIT) } else { T::zero() })
            })
            .collect();
        Ok(GppnnWeights {
            config: cfg.clone(),
            layout,
            tensors,
        })
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` kernels, zero biases, `rho = 0.1`.
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (t, fan) in w.tensors.iter_mut().zip(&w.layout.fan_in) {
            if let Some(fan) = *fan {
                let bound = 1.0 / (fan as f64).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(rng.gen_range(-bound..bound)));
            }
        }
        Ok(w)
    }

    /// [`init`](Self::init) followed by the scheme's proximal adjustment and
    /// every rho set to `rho`.
    pub fn init_with(cfg: &NetworkConfig, scheme: InitScheme, rho: f64) -> Result<Self> {
        let mut w = Self::init(cfg)?;
        for i in 0..w.layout.len() {
            if w.layout.is_rho[i] {
                w.tensors[i] = Tensor::full(vec![1], T::of(rho));
            }
        }
        if scheme == InitScheme::IdentityProx {
            let (b, c, k) = (cfg.bands, cfg.width, cfg.k_lr);
            if c < 2 * b {
                return arg_err(format!("identity proximal init needs width ≥ {}, got {c}", 2 * b));
            }
            let id = identity_block::<T>(b, c, k)?;
            for i in 0..w.layout.len() {
                let name = &w.layout.names[i];
                if !name.contains(".prox.") {
                    continue;
                }
                let base = match &name[name.len() - 2..] {
                    "w1" => &id.w1,
                    "b1" => &id.b1,
                    "w2" => &id.w2,
                    _ => &id.b2,
                };
                let t = &mut w.tensors[i];
                for (v, &e) in t.data_mut().iter_mut().zip(base.data()) {
                    *v = *v * T::of(PROX_NOISE) + e;
                }
            }
        }
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Replaces a named tensor, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .layout
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no weight named {name:?}")))?;
        if value.shape() != self.layout.shapes[i].as_slice() {
            return shape_err(format!(
                "weight {name} expects shape {:?}, got {:?}",
                self.layout.shapes[i],
                value.shape()
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Sets the four tensors of the block at `prefix` (e.g. `layer0.ms.prox`).
    pub fn set_block(&mut self, prefix: &str, block: ConvBlockWeights<T>) -> Result<()> {
        self.set(&format!("{prefix}.w1"), block.w1)?;
        self.set(&format!("{prefix}.b1"), block.b1)?;
        self.set(&format!("{prefix}.w2"), block.w2)?;
        self.set(&format!("{prefix}.b2"), block.b2)
    }

    pub fn set_rho(&mut self, name: &str, rho: f64) -> Result<()> {
        self.set(name, Tensor::full(vec![1], T::of(rho)))
    }

    /// Names of proximal-block tensors.
    pub fn prox_names(&self) -> Vec<&str> {
        self.layout
            .names
            .iter()
            .filter(|n| n.contains(".prox."))
            .map(String::as_str)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> GppnnWeights<U> {
        GppnnWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.layout.names.iter().zip(&self.tensors) {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let expect = Layout::new(&self.config)?;
        if expect != self.layout || self.tensors.len() != expect.len() {
            return arg_err("weights do not match their network config");
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.shape() != expect.shapes[i].as_slice() {
                return shape_err(format!(
                    "weight {} has shape {:?}, config expects {:?}",
                    expect.names[i],
                    t.shape(),
                    expect.shapes[i]
                ));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization from `seed` (overrides `cfg.seed`).
pub fn init_weights<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<GppnnWeights<T>> {
    GppnnWeights::init(&cfg.clone().with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(ablation: Ablation) -> NetworkConfig {
        NetworkConfig::new(8, 64, 4, 4).unwrap().with_ablation(ablation)
    }

    #[test]
    fn paper_scale_count() {
        // conv block 4→64→4 with 3x3 kernels: 64·4·9 + 64 + 4·64·9 + 4 = 4676
        // MS: 3 blocks + rho = 14029
        // PAN: (4·64 + 64 + 64 + 1) + (64 + 64 + 4·64 + 4) + 4676 + 1 = 5450
        let w = GppnnWeights::<f32>::zeros(&cfg(Ablation::None)).unwrap();
        assert_eq!(w.param_count(), 8 * (14029 + 5450));
        assert_eq!(w.config.param_count(), 155_832);
    }

    #[test]
    fn closed_form_matches_layout_for_every_ablation() {
        for a in Ablation::ALL {
            for (k, c, b) in [(1, 3, 1), (3, 8, 4), (2, 5, 3)] {
                let cfg = NetworkConfig::new(k, c, 2, b).unwrap().with_ablation(a);
                let w = GppnnWeights::<f64>::init(&cfg).unwrap();
                assert_eq!(w.param_count(), cfg.param_count(), "{a} K={k} C={c} B={b}");
            }
        }
    }

    #[test]
    fn ablation_structure() {
        let full = GppnnWeights::<f32>::zeros(&cfg(Ablation::None)).unwrap();
        let no_prox = GppnnWeights::<f32>::zeros(&cfg(Ablation::NoProx)).unwrap();
        let shared = GppnnWeights::<f32>::zeros(&cfg(Ablation::SharedWeights)).unwrap();
        assert!(!full.prox_names().is_empty());
        assert!(no_prox.prox_names().is_empty());
        assert_eq!(shared.param_count() * 8, full.param_count());
        let rhos = full.names().iter().filter(|n| n.ends_with(".rho")).count();
        assert_eq!(rhos, 16);
        let tied = GppnnWeights::<f32>::zeros(&cfg(Ablation::TransposedKernels)).unwrap();
        assert!(tied.get("layer0.ms.up.w1").is_none());
        assert!(tied.get("layer0.ms.up.b1").is_some());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = NetworkConfig::new(2, 6, 4, 4).unwrap();
        let a = init_weights::<f32>(&c, 7).unwrap();
        assert_eq!(a, init_weights(&c, 7).unwrap());
        assert_ne!(a, init_weights(&c, 8).unwrap());
        let w1 = a.get("layer0.ms.down.w1").unwrap();
        let bound = 1.0 / (4.0f32 * 9.0).sqrt();
        assert!(w1.data().iter().all(|v| v.abs() <= bound));
        assert!(w1.data().iter().any(|v| *v != 0.0));
        assert_eq!(a.get("layer1.pan.expand.b2").unwrap().max(), 0.0);
        assert_eq!(a.get("layer1.pan.rho").unwrap().item(), 0.1);
    }

    #[test]
    fn config_validation_and_names() {
        assert!(NetworkConfig::new(0, 4, 4, 4).is_err());
        assert!(NetworkConfig::new(1, 0, 4, 4).is_err());
        let mut c = NetworkConfig::new(1, 4, 4, 4).unwrap();
        c.k_pan = 3;
        assert!(c.validate().is_err());
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
        let json = serde_json::to_string(&cfg(Ablation::FusedBlock)).unwrap();
        assert!(json.contains("\"fused_block\""));
        assert_eq!(serde_json::from_str::<NetworkConfig>(&json).unwrap(), cfg(Ablation::FusedBlock));
    }

    #[test]
    fn set_checks_shape_and_name() {
        let mut w = GppnnWeights::<f32>::zeros(&NetworkConfig::new(1, 4, 4, 4).unwrap()).unwrap();
        assert!(w.set("layer0.ms.rho", Tensor::zeros(vec![2])).is_err());
        assert!(w.set("nope", Tensor::zeros(vec![1])).is_err());
        w.set_rho("layer0.ms.rho", 0.5).unwrap();
        assert_eq!(w.get("layer0.ms.rho").unwrap().item(), 0.5);
    }
}
