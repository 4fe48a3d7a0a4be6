//! Trainable building blocks and the two branch networks.

mod blocks;
mod store;
mod unet;
mod vae;

pub use blocks::{
    cross_attention, epipolar_attention, fourier_embed, fourier_embed_rows, gated_residual,
    AttnParams, Conv, GateParam, Linear, Mlp2, NetCtx, NormParams, ResBlock, ATTN_WIDTH,
    TOKEN_WIDTH,
};
pub use store::{Init, NetError, PId, ParamStore, CKPT_MAGIC};
pub use unet::{timestep_features, Branch, UNet, UNetState, TEMB_WIDTH};
pub use vae::{RangeVae, KL_WEIGHT, LATENT_CHANNELS};
