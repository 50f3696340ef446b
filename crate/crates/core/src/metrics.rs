//! Full-reference image quality metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`] once the MSE drops
/// below `peak^2 * 10^-9.9`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("psnr", "empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    let peak2 = peak * peak;
    if mse < peak2 * 10f64.powf(-PSNR_CAP_DB / 10.0) {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak2 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Gaussian-weighted local mean of one channel plane. Near the border the
/// window is cut to the image and its weights renormalized.
fn local_mean(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, ext) = if along_rows { (x, w) } else { (y, h) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &wt) in taps.iter().enumerate() {
                    let Some(p) = (pos + t).checked_sub(r).filter(|&p| p < ext) else {
                        continue;
                    };
                    let idx = if along_rows { y * w + p } else { p * w + x };
                    acc += wt * src[idx];
                    norm += wt;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    blur(&blur(plane, true), false)
}

/// Mean SSIM over pixels and channels of two `[H, W, C]` images in `[0, peak]`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let &[h, w, c] = a.shape() else {
        return Err(Error::invalid(
            "ssim",
            format!("expected [H, W, C], got {:?}", a.shape()),
        ));
    };
    if h * w * c == 0 {
        return Err(Error::invalid("ssim", "empty images"));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|p| a.data()[p * c + ch]).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b.data()[p * c + ch]).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = local_mean(&pa, h, w, &taps);
        let mu_b = local_mean(&pb, h, w, &taps);
        let e_aa = local_mean(&prod(&pa, &pa), h, w, &taps);
        let e_bb = local_mean(&prod(&pb, &pb), h, w, &taps);
        let e_ab = local_mean(&prod(&pa, &pb), h, w, &taps);
        for p in 0..h * w {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = e_aa[p] - ma * ma;
            let vb = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (h * w * c) as f64)
}
