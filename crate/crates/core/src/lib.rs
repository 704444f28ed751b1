//! Class-fair unsupervised domain adaptation for semantic segmentation.
//!
//! The crate trains a small segmenter across a synthetic source → target
//! domain shift. On top of the usual supervised and pseudo-label losses it
//! adds a class-distribution term that reweights classes towards a uniform
//! ideal distribution, and a structural term scored by a frozen masked-token
//! transformer trained on source label grids.

pub mod autodiff;
pub mod checkpoint;
pub mod class_stats;
pub mod cond;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod segmenter;
pub mod tensor;
pub mod trainer;

pub use autodiff::{CeTarget, Gradients, Grid, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use class_stats::{ClassDistribution, GroupSplit};
pub use cond::{CondNet, CondNetConfig, TokenGrid};
pub use data::{DatasetPack, DomainConfig, Sample, SceneSpec};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use metrics::{ConfusionMatrix, FairnessReport};
pub use nn::NetworkParams;
pub use segmenter::{ClassBalanceForm, Segmenter, SegmenterConfig};
pub use tensor::{matmul, softmax_lastdim, DType, Scalar, Tensor};
pub use trainer::{Ablation, LossBreakdown, TrainConfig, TrainState};
