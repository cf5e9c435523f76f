//! Context-conditioned Bayesian low-rank adaptation over a frozen backbone.
//!
//! The crate provides the four adapter families (`lora`, `blob`, `clora`,
//! `coco`) plus a feature-fusion baseline, a reparameterized ELBO trainer with
//! hand-written gradients, Monte-Carlo predictive inference, calibration and
//! discrimination metrics, synthetic multimodal data and a binary checkpoint
//! format.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;
pub mod variational;

pub use adapters::{Family, ParamGroup, ParameterCount};
pub use data::{Dataset, Sample, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalSummary, PredictiveResult};
pub use model::{KeyedNoise, Mode, Model, ModelConfig, NoiseSource, TrainableParams, ZeroNoise};
pub use numerics::{Matrix, Purpose, SeededRng, StreamId};
pub use training::{EpochStats, LossBreakdown, TrainConfig};
pub use variational::{DiagonalGaussian, IsotropicPrior};
