//! Luminance PSNR and SSIM on images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// BT.601 luma of an `N x 3 x H x W` RGB batch, as `N x 1 x H x W`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let [n, c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::contract(format!("expected an RGB image, got {c} channels")));
    }
    Ok(Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let r = img.at(b, 0, y, x).as_f64();
        let g = img.at(b, 1, y, x).as_f64();
        let bl = img.at(b, 2, y, x).as_f64();
        (16.0 + 65.481 * r + 128.553 * g + 24.966 * bl) / 255.0
    }))
}

fn same_shape<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)` of two single-channel images on unit range.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR on the luma channel of two RGB images.
pub fn psnr_y<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt, "psnr_y")?;
    psnr(&rgb_to_y(pred)?, &rgb_to_y(gt)?)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions of single-channel images.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..n * c {
        let xa = &a.data()[plane * h * w..(plane + 1) * h * w];
        let xb = &b.data()[plane * h * w..(plane + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect() };
        let mu_a = filter_valid(xa, h, w, &taps);
        let mu_b = filter_valid(xb, h, w, &taps);
        let aa = filter_valid(&prod(&|p, _| p * p), h, w, &taps);
        let bb = filter_valid(&prod(&|_, q| q * q), h, w, &taps);
        let ab = filter_valid(&prod(&|p, q| p * q), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM on the luma channel of two RGB images.
pub fn ssim_y<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt, "ssim_y")?;
    ssim(&rgb_to_y(pred)?, &rgb_to_y(gt)?)
}

/// Formats a PSNR value, spelling the identical-image case as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
