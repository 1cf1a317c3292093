//! Token-mixing ranking model: blocks, routing variants, parameters, checkpoints.

mod block;
pub mod checkpoint;
mod config;
mod mixing;
#[allow(clippy::module_inception)]
mod model;
mod params;

pub use block::{all_share, concat_mlp, per_token_ffn, shared_ffn};
pub use config::{RankMixerConfig, RoutingVariant, Toggles, HEADS_EQUAL_TOKENS_RULE};
pub use mixing::{split_heads, token_mixing};
pub use model::{
    BlockParams, FfnParams, Forward, Init, LayerNormParams, Manifest, MixerParams, Mode, MoeParams, ParamSink, RankMixer,
};
pub use params::{Bound, Param, ParamId, ParamStore};
