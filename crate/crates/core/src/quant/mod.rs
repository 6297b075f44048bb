//! Scalar (FSQ) and learned-codebook (VQ) quantizers.

mod fsq;
mod tokens;
mod vq;

pub use fsq::{bound, dequantize_scalar, quantize_scalar, representative_latent, Dequant, FsqSpec};
pub use tokens::TokenGrid;
pub use vq::{codebook_usage, vq_straight_through, EmaCodebook, VqCodebook, VqOutput, DEFAULT_BETA};
