//! Gradient-projection pan-sharpening.
//!
//! The crate provides the LRMS/PAN observation models, a classical
//! gradient-projection solver built on the exact operators, the unrolled
//! GPPNN network with its MS and PAN blocks, a small reverse-mode
//! differentiation engine to train it, classical fusion baselines and the
//! usual reduced-resolution quality metrics.

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod gppnn;
pub mod gradcheck;
pub mod gradsuite;
pub mod image_ops;
pub mod metrics;
pub mod observation;
pub mod optim;
pub mod tensor;

pub use autodiff::{Fault, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use image_ops::{ConvKernel, Scale};
pub use tensor::{Scalar, Tensor};
