//! Sequence and image metrics.

mod dtw;
mod image;

pub use dtw::{dtw, dtw_frames, l2, DtwResult};
pub use image::{frame_psnr, psnr, psnr_from_mse, ssim, SSIM_C1, SSIM_C2, SSIM_WINDOW};
