//! Image quality metrics on normalized `[0, 1]` intensities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{filter_valid_raw, Tensor};

/// PSNR reported for a zero-error reconstruction, and the ceiling for all others.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn psnr(reference: &Tensor, test: &Tensor, max_val: f64) -> Result<f64> {
    same_shape("psnr", reference, test)?;
    if max_val <= 0.0 {
        return Err(Error::Config(format!("psnr max_val must be positive, got {max_val}")));
    }
    let e = mse(reference.data(), test.data());
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / e).log10()).min(PSNR_CAP_DB))
}

pub fn nmse(reference: &Tensor, test: &Tensor) -> Result<f64> {
    same_shape("nmse", reference, test)?;
    let energy: f64 = reference.data().iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::UndefinedMetric("nmse of an all-zero reference".into()));
    }
    let err: f64 = reference.data().iter().zip(test.data()).map(|(r, t)| (r - t).powi(2)).sum();
    Ok(err / energy)
}

fn plane_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::Config(format!("{op} expects a single-channel image, got {:?}", t.shape()))),
    }
}

/// Mean SSIM over the valid-mode local map, `L = 1`.
pub fn ssim(reference: &Tensor, test: &Tensor) -> Result<f64> {
    same_shape("ssim", reference, test)?;
    let (h, w) = plane_dims("ssim", reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (reference.data(), test.data());
    let filt = |v: &[f64]| filter_valid_raw(v, h, w, &k);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, my) = (filt(x), filt(y));
    let (exx, eyy, exy) = (filt(&prod(x, x)), filt(&prod(y, y)), filt(&prod(x, y)));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let sxx = exx[i] - a * a;
            let syy = eyy[i] - b * b;
            let sxy = exy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * sxy + c2)) / ((a * a + b * b + c1) * (sxx + syy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Differentiable SSIM map mean over every `[h, w]` plane of `[.., h, w]` inputs.
pub(crate) fn ssim_tensor(reference: &Tensor, test: &Tensor) -> Result<Tensor> {
    same_shape("ssim", reference, test)?;
    let k = Arc::new(gaussian_window(SSIM_WINDOW, SSIM_SIGMA));
    let filt = |t: &Tensor| t.filter2d_valid(k.clone());
    let mx = filt(reference)?;
    let my = filt(test)?;
    let exx = filt(&reference.square())?;
    let eyy = filt(&test.square())?;
    let exy = filt(&reference.mul(test)?)?;
    let mxx = mx.square();
    let myy = my.square();
    let mxy = mx.mul(&my)?;
    let sxx = exx.sub(&mxx)?;
    let syy = eyy.sub(&myy)?;
    let sxy = exy.sub(&mxy)?;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let num = mxy.mul_scalar(2.0).add_scalar(c1).mul(&sxy.mul_scalar(2.0).add_scalar(c2))?;
    let den = mxx.add(&myy)?.add_scalar(c1).mul(&sxx.add(&syy)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean())
}

/// One image pair, or the arithmetic mean over `n_images` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    #[serde(rename = "n")]
    pub n_images: usize,
}

impl MetricsRecord {
    pub fn of_pair(reference: &Tensor, test: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, test, 1.0)?,
            ssim: ssim(reference, test)?,
            nmse: nmse(reference, test)?,
            n_images: 1,
        })
    }

    /// Mean of per-image values; each input counts once regardless of its own `n_images`.
    pub fn mean(records: &[MetricsRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::UndefinedMetric("mean over zero images".into()));
        }
        let n = records.len() as f64;
        Ok(Self {
            psnr: records.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
            nmse: records.iter().map(|r| r.nmse).sum::<f64>() / n,
            n_images: records.len(),
        })
    }
}
