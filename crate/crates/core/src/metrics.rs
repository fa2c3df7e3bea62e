//! Full-reference quality metrics: PSNR on all RGB components, SSIM on luma.

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported for bit-identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// SSIM window: 11x11 Gaussian, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared error over all H*W*3 components.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / err).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let g = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize] = g;
            sum += g;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all fully-supported 11x11 windows of the
/// luma channel. Requires both images to share dimensions with min side >= 11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            h,
            w,
            min_side: SSIM_WINDOW,
        });
    }
    let la = a.luma();
    let lb = b.luma();
    let win = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            let mut wi = 0usize;
            for dy in 0..SSIM_WINDOW {
                let row = (y0 + dy) * w + x0;
                for dx in 0..SSIM_WINDOW {
                    let g = win[wi];
                    wi += 1;
                    let va = la[row + dx];
                    let vb = lb[row + dx];
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed, &[0x6d]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn psnr_identical_capped() {
        let img = random_image(8, 8, 1);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_difference() {
        let a = Image::filled(4, 4, 0.4);
        let b = Image::filled(4, 4, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_brute_force() {
        let a = random_image(9, 13, 2);
        let b = random_image(9, 13, 3);
        // Direct double loop, independent of the mse() path above.
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..9 {
            for x in 0..13 {
                let pa = a.get(y, x);
                let pb = b.get(y, x);
                for c in 0..3 {
                    sum += (pa[c] - pb[c]).powi(2);
                    n += 1;
                }
            }
        }
        let expect = 10.0 * (1.0 / (sum / n as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_symmetric() {
        let a = random_image(8, 8, 4);
        let b = random_image(8, 8, 5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_dimension_mismatch() {
        let a = Image::filled(4, 4, 0.0);
        let b = Image::filled(4, 5, 0.0);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let img = random_image(16, 16, 6);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Variance terms cancel; luminance term gives C1/(1 + C1).
        let a = Image::filled(12, 12, 0.0);
        let b = Image::filled(12, 12, 1.0);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn ssim_near_identity_perturbation() {
        let a = random_image(24, 24, 7);
        let mut rng = crate::rng::stream(8, &[1]);
        let px: Vec<f64> = a
            .pixels()
            .iter()
            .map(|v| v + 1e-4 * (rng.gen::<f64>() - 0.5))
            .collect();
        let b = Image::new(24, 24, px);
        assert!(ssim(&a, &b).unwrap() > 0.99);
    }

    #[test]
    fn ssim_symmetric() {
        let a = random_image(16, 16, 9);
        let b = random_image(16, 16, 10);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = Image::filled(8, 20, 0.5);
        assert!(matches!(ssim(&a, &a), Err(crate::error::Error::ImageTooSmall { .. })));
    }

    #[test]
    fn requantization_psnr_bound() {
        // Max per-component error of 8-bit quantization is 0.5/255.
        let img = random_image(16, 16, 11);
        let q = img.quantized();
        let p = psnr(&img, &q).unwrap();
        assert!(p >= 48.0, "psnr {p}");
        assert!(p < PSNR_CAP_DB);
    }
}
