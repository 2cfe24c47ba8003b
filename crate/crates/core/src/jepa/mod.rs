//! Per-level joint-embedding predictive model with top-down attention.

pub mod forward;
pub mod masking;
pub mod model;

pub use forward::{
    embed_pooled, encode, encode_hierarchy, encode_sequence, forward_item, infer, pool, predict, propagate_attention,
    upsample_map, Encoded, Injection, LevelOutput,
};
pub use masking::{mask_len, sample_context, sample_plan, sample_target_masks, MaskConfig, MaskPlan, TargetMasks};
pub use model::{
    ema_update, Bindings, DeconvSquash, Interaction, LevelParams, Linear, ModelConfig, ModelState, Pooling,
};
