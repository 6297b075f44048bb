use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / mse)`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("image shapes {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.rank() < 2 {
        return Err(Error::shape("images need at least two axes"));
    }
    Ok(())
}

pub fn frame_psnr(x: &[f64], y: &[f64]) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    psnr_from_mse(mse)
}

/// Mean over frames (first axis) of per-frame PSNR for `[0, 1]` pixels.
/// Any identical frame makes the result `+inf`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let f = x.frames();
    Ok((0..f).map(|i| frame_psnr(x.frame_data(i), y.frame_data(i))).sum::<f64>() / f as f64)
}

/// Mean SSIM over every valid 7x7 window of every plane. The last two axes
/// are the image; all leading axes enumerate planes. Window statistics use
/// population (1/N) moments.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the SSIM window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in x.data().chunks(h * w).zip(y.data().chunks(h * w)) {
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let a = px[(i + di) * w + j + dj];
                        let b = py[(i + di) * w + j + dj];
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cxy = sxy / n - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_offset() {
        let x = Tensor::full([2, 1, 8, 8], 0.3);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = Tensor::from_fn([1, 9, 9], |i| ((i * 7) % 11) as f64 / 11.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros([4, 4]), &Tensor::zeros([4, 4])).is_err());
    }
}
