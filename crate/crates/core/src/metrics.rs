//! PSNR and SSIM on 8-bit RGB images.

use crate::error::{Error, Result};
use crate::numerics::Image;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "image dimensions",
            (a.width(), a.height()),
            (b.width(), b.height()),
        ));
    }
    Ok(())
}

fn psnr_from_sse(sse: f64, count: usize) -> f64 {
    if sse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64 * 255.0 * count as f64 / sse).log10()
}

/// `10·log10(255² / MSE)` over all channels; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(psnr_from_sse(sse, a.pixels().len()))
}

/// PSNR restricted to pixels where `mask` (row-major, one flag per pixel) is set.
pub fn masked_psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_dims(a, b)?;
    if mask.len() != a.width() * a.height() {
        return Err(Error::shape("masked_psnr mask", a.width() * a.height(), mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    let sse: f64 = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(i, _)| (0..3).map(move |c| i * 3 + c))
        .map(|i| (a.pixels()[i] as f64 - b.pixels()[i] as f64).powi(2))
        .sum();
    Ok(psnr_from_sse(sse, count * 3))
}

/// BT.601 luma.
fn luma(img: &Image) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Mean SSIM over all 8x8 windows (stride 1) of the luma channel, with a
/// uniform window and population statistics.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in top..top + SSIM_WINDOW {
                for c in left..left + SSIM_WINDOW {
                    sx += x[r * w + c];
                    sy += y[r * w + c];
                }
            }
            let (mx, my) = (sx / n, sy / n);
            // Centred second pass so that ssim(a, a) is exactly 1.
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for r in top..top + SSIM_WINDOW {
                for c in left..left + SSIM_WINDOW {
                    let (u, v) = (x[r * w + c] - mx, y[r * w + c] - my);
                    vx += u * u;
                    vy += v * v;
                    cov += u * v;
                }
            }
            let (vx, vy, cov) = (vx / n, vy / n, cov / n);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let base = Image::filled(8, 8, [100, 50, 7]);
        let plus = Image::filled(8, 8, [101, 51, 8]);
        assert!((psnr(&base, &plus).unwrap() - 48.130803608679).abs() < 1e-9);
        assert!(psnr(&a, &random_image(1, 4, 8)).is_err());
    }

    #[test]
    fn psnr_matches_double_loop() {
        let (a, b) = (random_image(2, 10, 6), random_image(3, 10, 6));
        let mut sse = 0.0f64;
        for y in 0..6 {
            for x in 0..10 {
                let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                for c in 0..3 {
                    sse += (p[c] as f64 - q[c] as f64) * (p[c] as f64 - q[c] as f64);
                }
            }
        }
        let want = 10.0 * (255.0f64 * 255.0 / (sse / 180.0)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn masked_cases() {
        let a = random_image(4, 4, 4);
        let mut mask = vec![false; 16];
        assert!(masked_psnr(&a, &a, &mask).is_err());
        mask[5] = true;
        mask[6] = true;
        assert_eq!(masked_psnr(&a, &a, &mask).unwrap(), f64::INFINITY);
        let mut b = a.clone();
        let p = a.pixel(1, 1);
        b.set_pixel(1, 1, [p[0] ^ 0x10, p[1], p[2]]);
        // One channel of one pixel off by 16, averaged over 2 pixels x 3 channels.
        let want = 10.0 * (255.0f64.powi(2) / (256.0 / 6.0)).log10();
        assert!((masked_psnr(&a, &b, &mask).unwrap() - want).abs() < 1e-9);
        // Differences outside the mask do not count.
        b.set_pixel(3, 3, [0, 0, 0]);
        assert!((masked_psnr(&a, &b, &mask).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn masked_matches_loop_oracle() {
        let (a, b) = (random_image(5, 8, 8), random_image(6, 8, 8));
        let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let (mut sse, mut n) = (0.0, 0.0);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let (p, q) = (a.pixel(i % 8, i / 8), b.pixel(i % 8, i / 8));
                for c in 0..3 {
                    sse += (p[c] as f64 - q[c] as f64).powi(2);
                    n += 1.0;
                }
            }
        }
        let want = 10.0 * (65025.0 / (sse / n)).log10();
        assert!((masked_psnr(&a, &b, &mask).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_image(7, 16, 12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let mut pattern = Image::filled(16, 16, [0, 0, 0]);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x / 2 + y / 3) % 2 == 0 { 96 } else { 160 };
                pattern.set_pixel(x, y, [v, v, v]);
            }
        }
        let inv = Image::new(16, 16, pattern.pixels().iter().map(|&v| 255 - v).collect()).unwrap();
        assert!(ssim(&pattern, &inv).unwrap() < 0.0);
        assert!(ssim(&Image::filled(7, 9, [0, 0, 0]), &Image::filled(7, 9, [0, 0, 0])).is_err());
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let a = Image::filled(8, 8, [50, 50, 50]);
        let b = Image::filled(8, 8, [60, 60, 60]);
        // Single window, zero variance: only the luminance term remains.
        let (mx, my) = (50.0f64, 60.0f64);
        let c1 = 6.5025f64;
        let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn symmetric(sa in any::<u64>(), sb in any::<u64>()) {
            let (a, b) = (random_image(sa, 9, 8), random_image(sb, 9, 8));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
