//! RGB and depth encoders: a frozen backbone with trainable side networks,
//! and a selective state-space encoder for depth.

pub mod backbone;
pub mod side;
pub mod ssm;

pub use backbone::{
    depth_tensor, extract_patches, frozen_forward, patch_embed, rgb_tensor, BackboneConfig,
    BackboneParams, TokenSequence,
};
pub use side::{side_forward, EncodedFeatures, SideNetParams};
pub use ssm::{mamba_encode, SsmConfig, SsmParams};
