//! Reconstruction quality metrics (RMSE, MAE, PSNR, SSIM, a perceptual
//! feature distance) plus brightness statistics, all computable over the
//! full image or the masked region only.

use std::fmt;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::perceptual::FeatureExtractor;
use crate::raster::Raster;
use crate::scalar::Scalar;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Which pixels a metric ranges over.
#[derive(Clone, Copy)]
pub enum Scope<'a> {
    Full,
    /// only pixels the mask marks as missing (i.e. generated pixels)
    Masked(&'a Mask),
}

impl fmt::Display for Scope<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Full => write!(f, "full"),
            Scope::Masked(_) => write!(f, "masked"),
        }
    }
}

impl Scope<'_> {
    /// In-scope pixel indices within one H*W plane.
    fn indices(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match self {
            Scope::Full => (0..h * w).collect(),
            Scope::Masked(m) => {
                if m.height != h || m.width != w {
                    return Err(Error::geometry("scope mask shape mismatch"));
                }
                (0..h * w).filter(|&i| m.data()[i]).collect()
            }
        };
        if idx.is_empty() {
            return Err(Error::contract("metric scope selects no pixels"));
        }
        Ok(idx)
    }
}

fn scoped_diffs<S: Scalar>(pred: &Raster<S>, truth: &Raster<S>, scope: Scope<'_>) -> Result<Vec<f64>> {
    if pred.bands != truth.bands || pred.height != truth.height || pred.width != truth.width {
        return Err(Error::geometry("pred/truth shape mismatch"));
    }
    let idx = scope.indices(pred.height, pred.width)?;
    let n = pred.height * pred.width;
    let mut diffs = Vec::with_capacity(idx.len() * pred.n_bands());
    for b in 0..pred.n_bands() {
        for &i in &idx {
            diffs.push(pred.data()[b * n + i].to_f64_() - truth.data()[b * n + i].to_f64_());
        }
    }
    Ok(diffs)
}

pub fn rmse<S: Scalar>(pred: &Raster<S>, truth: &Raster<S>, scope: Scope<'_>) -> Result<f64> {
    let d = scoped_diffs(pred, truth, scope)?;
    Ok((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
}

pub fn mae<S: Scalar>(pred: &Raster<S>, truth: &Raster<S>, scope: Scope<'_>) -> Result<f64> {
    let d = scoped_diffs(pred, truth, scope)?;
    Ok(d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64)
}

/// 20 log10(max) - 20 log10(rmse), capped at 99 dB for rmse < 1e-10.
pub fn psnr<S: Scalar>(pred: &Raster<S>, truth: &Raster<S>, scope: Scope<'_>, max_value: f64) -> Result<f64> {
    let r = rmse(pred, truth, scope)?;
    Ok(psnr_from_rmse(r, max_value))
}

pub fn psnr_from_rmse(rmse: f64, max_value: f64) -> f64 {
    if rmse < 1e-10 {
        return PSNR_CAP_DB;
    }
    (20.0 * max_value.log10() - 20.0 * rmse.log10()).min(PSNR_CAP_DB)
}

/// Sliding-window SSIM, 8x8 window stride 1, C1=(0.01 max)^2, C2=(0.03 max)^2.
pub fn ssim<S: Scalar>(pred: &Raster<S>, truth: &Raster<S>) -> Result<f64> {
    ssim_windowed(pred, truth, 8, 1.0)
}

pub fn ssim_windowed<S: Scalar>(
    pred: &Raster<S>,
    truth: &Raster<S>,
    win: usize,
    max_value: f64,
) -> Result<f64> {
    if pred.n_bands() != 1 || truth.n_bands() != 1 {
        return Err(Error::geometry("ssim takes single-band rasters"));
    }
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::geometry("pred/truth shape mismatch"));
    }
    let (h, w) = (pred.height, pred.width);
    if h < win || w < win {
        return Err(Error::size(format!("image {h}x{w} smaller than {win}x{win} ssim window")));
    }
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let area = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let a = pred.data()[y * w + x].to_f64_();
                    let b = truth.data()[y * w + x].to_f64_();
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / area;
            let my = sy / area;
            let vx = sxx / area - mx * mx;
            let vy = syy / area - my * my;
            let cov = sxy / area - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Feature-space distance: weighted mean over tap layers of the mean squared
/// difference between channel-unit-normalized feature maps. Shaped like
/// LPIPS but computed with the repo's fixed extractor, so absolute values
/// are not comparable with published LPIPS numbers.
pub fn perceptual_distance<S: Scalar>(
    pred: &Raster<S>,
    truth: &Raster<S>,
    ex: &FeatureExtractor<S>,
) -> Result<f64> {
    let ps = ex.extract(pred)?;
    let ts = ex.extract(truth)?;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for ((fp, ft), &w) in ps.style.iter().zip(&ts.style).zip(&ex.layer_weights) {
        let (c, hw) = (fp.shape()[0], fp.shape()[1] * fp.shape()[2]);
        let normed = |t: &crate::tensor::Tensor<S>, pos: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..c).map(|ch| t.data()[ch * hw + pos].to_f64_()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-10);
            for x in &mut v {
                *x /= norm;
            }
            v
        };
        let mut layer = 0.0;
        for pos in 0..hw {
            let a = normed(fp, pos);
            let b = normed(ft, pos);
            layer += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        acc += w * layer / (c * hw) as f64;
        wsum += w;
    }
    Ok(acc / wsum)
}

/// Mean and population standard deviation of 255*v over in-scope pixels.
pub fn brightness_stats<S: Scalar>(image: &Raster<S>, scope: Scope<'_>) -> Result<(f64, f64)> {
    let idx = scope.indices(image.height, image.width)?;
    let n = image.height * image.width;
    let count = (idx.len() * image.n_bands()) as f64;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for b in 0..image.n_bands() {
        for &i in &idx {
            let v = 255.0 * image.data()[b * n + i].to_f64_();
            sum += v;
            sum2 += v * v;
        }
    }
    let mu = sum / count;
    let var = (sum2 / count - mu * mu).max(0.0);
    Ok((mu, var.sqrt()))
}

/// One results-table row.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub method: String,
    pub band: String,
    pub missing_ratio: f64,
    pub scope: String,
    pub ssim: f64,
    pub psnr: f64,
    pub rmse: f64,
    pub mae: f64,
    pub perceptual: f64,
    pub n_pixels: usize,
}

pub const CSV_HEADER: &str = "method,band,missing_ratio,scope,ssim,psnr,rmse,mae,perceptual,n_pixels";

impl MetricsReport {
    pub fn compute<S: Scalar>(
        method: &str,
        band: &str,
        missing_ratio: f64,
        pred: &Raster<S>,
        truth: &Raster<S>,
        scope: Scope<'_>,
        ex: &FeatureExtractor<S>,
    ) -> Result<MetricsReport> {
        let r = rmse(pred, truth, scope)?;
        let m = mae(pred, truth, scope)?;
        debug_assert!(r + 1e-12 >= m);
        let n_pixels = scope.indices(pred.height, pred.width)?.len();
        Ok(MetricsReport {
            method: method.to_string(),
            band: band.to_string(),
            missing_ratio,
            scope: scope.to_string(),
            ssim: ssim(pred, truth)?,
            psnr: psnr_from_rmse(r, 1.0),
            rmse: r,
            mae: m,
            perceptual: perceptual_distance(pred, truth, ex)?,
            n_pixels,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.4},{:.6},{:.6},{:.6},{}",
            self.method,
            self.band,
            self.missing_ratio,
            self.scope,
            self.ssim,
            self.psnr,
            self.rmse,
            self.mae,
            self.perceptual,
            self.n_pixels
        )
    }
}
