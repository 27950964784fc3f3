//! Conditional denoising network (stage two).
//!
//! A small U-Net whose levels apply a residual local-enhance block followed by
//! a block conditioned on the dose embedding (per-channel modulation fused
//! with the timestep) and on the anatomy embedding (added to the output
//! matrix of a four-direction selective scan), plus channel attention.

mod blocks;
mod embed;
mod layers;
mod net;

pub use blocks::{
    four_directions, Condition, Cssm, Dacb, DacbDims, DacbVariant, InitMode, Modulation, ModulationMlp, Rleb, ScanOrder,
    TransposedAttention,
};
pub use embed::timestep_embed;
pub use layers::{channel_layer_norm, he_std, Conv3, Linear, Pointwise};
pub use net::{Denoiser, DenoiserConfig};
