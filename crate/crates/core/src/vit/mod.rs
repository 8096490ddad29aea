//! Vision Transformer: parameters, forward/backward passes, positional
//! resampling and attention-mass masks.

mod config;
mod mask;
mod model;
mod pos_embed;

pub use config::{init_params, param_schema, validate_names, ModelConfig, NameReport};
pub use mask::{attention_mask, cls_patch_attention, mass_mask, AttentionMask, MASS_TOLERANCE};
pub use model::{forward, layer_group, loss_and_grads, ForwardTrace};
pub use pos_embed::interpolate_pos_embed;

pub(crate) use model::{argmax, cross_entropy};
