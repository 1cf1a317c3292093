//! Token-mixing ranking model with per-token FFNs and sparse mixture of
//! experts, trained on synthetic recommendation data with a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod moe;
pub mod tokenizer;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use config::{parse_config, ExperimentConfig, OutputConfig};
pub use cost::{CostConfig, CostReport};
pub use data::{DataConfig, Dataset, EmbeddingSet, InteractionSpec, Sample, Schema};
pub use error::{Error, Result};
pub use model::{Mode, RankMixer, RankMixerConfig, RoutingVariant, Toggles};
pub use moe::{AdaptiveLambda, ExpertUtilization, MoEConfig};
pub use tokenizer::TokenizerConfig;
pub use train::{fmt_float, MetricsReport, TrainConfig, TrainOutcome, TrainSetup};
