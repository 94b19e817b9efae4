//! LLaMA-style decoder with head/channel masks and LoRA adapters.

mod checkpoint;
mod config;
mod forward;
mod lora;
mod masks;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, RMS_EPS, ROPE_BASE};
pub use forward::{
    bind_lora, bind_masks, bind_params, check_tokens, ffn_masked, forward_lm, mha_masked,
    GraphOptions, LmGraph, LmOutput, Trainable,
};
pub use lora::{apply_lora, LoraAdapter, LoraSet};
pub use masks::{MaskSet, MaskTensors, UnitKind};
pub use params::{LayerParams, ModelParams, Proj};
