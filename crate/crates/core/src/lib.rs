//! Metric learning toolkit built around a combined ranking-plus-classification
//! objective: a hypersphere pairwise hinge loss with exponentially weighted
//! negatives, added to a label-smoothed softmax loss, trained through a
//! bias-free batch-norm neck.
//!
//! The crate covers the full loop at desk scale:
//!
//! * [`embedding`] geometry primitives (L2 normalization, pairwise distances)
//! * [`losses`] the loss family with analytic gradients
//! * [`model`] a small MLP encoder with a BN-neck head and hand-written backward
//! * [`sampler`] identity-balanced P×K batches
//! * [`trainer`] SGD with momentum and warmup
//! * [`evalkit`] CMC / mAP and k-reciprocal re-ranking
//! * [`synthdata`] seeded synthetic identity datasets
//! * [`gradcheck`] finite-difference verification of every gradient path
//! * [`cli`] the `metric-forge` command line

pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use embedding::{l2_normalize, pairwise_distances, DistanceMatrix, EmbeddingBatch};
pub use error::{Error, Result};
pub use evalkit::{EvalReport, EvalSplit, RerankConfig};
pub use losses::{GradPacket, LossBreakdown, LossConfig};
pub use model::{ForwardTrace, HeadOptions, Mode, ModelParams, ParamGrads};
pub use sampler::{BatchPlan, PkSampler};
pub use synthdata::{SynthSpec, SyntheticDataset};
pub use trainer::{TrainConfig, TrainLog, TrainMode};
