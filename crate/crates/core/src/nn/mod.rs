//! Reusable network blocks shared by the deformation network and the plane
//! generators.

pub mod attention;
pub mod conv_blocks;
pub mod layers;
pub mod posenc;

pub use attention::{CrossAttentionBlock, FeedForward, SpatialTransformerBlock};
pub use conv_blocks::{ResConvBlock, UpsampleBlock};
pub use layers::{Conv3x3, Linear, Norm};
pub use posenc::{posenc_2d, posenc_points};
