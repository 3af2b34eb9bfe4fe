//! Tokenizer, head detector, prior encoder, prompt builder, the two
//! interleaved state/token decoders and every output head.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, ParamInfo, MANIFEST};
pub use config::ModelConfig;
pub use layers::{sincos_2d, Attention, AttnOut, Block, LayerNorm, Linear, Mlp};
pub use model::{
    detect_heads, patchify, pixel_shuffle, prior_slots, prior_target_len, prior_windows, to_patch_order, Decoded,
    FrameVars, Model, PriorEncoder, PRIOR_COLS, PRIOR_ROWS,
};
pub use params::{Graph, Group, ParamEntry, ParamId, ParamStore};
