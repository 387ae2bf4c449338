//! Neural denoiser for the relighting pipeline: a small UNet with per-view
//! self-attention, optional multi-view attention, and lighting
//! cross-attention, implemented with hand-written forward/backward kernels
//! over a flat parameter store. Generic over f32/f64 so gradients can be
//! verified in 64-bit and training can run in 32-bit.

pub mod blocks;
pub mod checkpoint;
pub mod conditioning;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod real;
pub mod unet;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint};
pub use conditioning::{
    build_conditioning, decode_views, encode_views, lighting_tokens, stack_packs,
    ConditioningFlags, ConditioningPack, LightingTokens,
};
pub use gradcheck::{batch_loss, grad_check, make_tiny_setup, TinyBatch};
pub use param::{Init, ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use unet::{denoise, Denoiser, ForwardInput, UNetConfig};
