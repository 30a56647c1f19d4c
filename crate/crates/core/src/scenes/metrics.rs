use crate::error::{Error, Result};
use crate::render::Image;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// `10 log10(1 / MSE)` over all channels, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    })
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_WINDOW: usize = 11;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single-channel plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// computed per channel over valid window positions and averaged. Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w == 0 || h == 0 {
        return Err(Error::invalid("SSIM of an empty image"));
    }
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a
            .data()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b
            .data()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter(&x, w, h, &k);
        let (my, ..) = filter(&y, w, h, &k);
        let (sxx, ..) = filter(&xx, w, h, &k);
        let (syy, ..) = filter(&yy, w, h, &k);
        let (sxy, ..) = filter(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let img = Image::from_data(
            12,
            13,
            (0..12 * 13 * 3).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset() {
        let a = Image::filled(16, 16, [0.4; 3]);
        let b = Image::filled(16, 16, [0.5; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        // Constant images: only the luminance term differs from one.
        let (x, y) = (0.4f32 as f64, 0.5f32 as f64);
        let expected = (2.0 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() <= 1e-6);
    }

    #[test]
    fn size_mismatch() {
        assert!(psnr(&Image::new(2, 2), &Image::new(2, 3)).is_err());
        assert!(ssim(&Image::new(2, 2), &Image::new(3, 2)).is_err());
    }
}
