//! Quality filtering, seeded random masking at an exact target ratio, and
//! mask application. Masks serialize through the .rsr container with band
//! name "mask" and values in {0.0, 1.0}, so a saved mask file fully
//! reproduces a reported experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Per-pixel boolean grid; true = missing.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    data: Vec<bool>,
    pub height: usize,
    pub width: usize,
    /// achieved missing fraction over valid pixels, exactly as constructed
    pub ratio: f64,
    pub seed: u64,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::geometry("mask data length mismatch"));
        }
        let n = data.len();
        let missing = data.iter().filter(|&&m| m).count();
        Ok(Mask { data, height, width, ratio: missing as f64 / n as f64, seed: 0 })
    }

    pub fn all_false(height: usize, width: usize) -> Self {
        Mask { data: vec![false; height * width], height, width, ratio: 0.0, seed: 0 }
    }

    pub fn all_true(height: usize, width: usize) -> Self {
        Mask { data: vec![true; height * width], height, width, ratio: 1.0, seed: 0 }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count_missing(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn invert(&self) -> Mask {
        let data: Vec<bool> = self.data.iter().map(|&m| !m).collect();
        let missing = data.iter().filter(|&&m| m).count();
        Mask {
            ratio: missing as f64 / data.len() as f64,
            data,
            height: self.height,
            width: self.width,
            seed: self.seed,
        }
    }

    pub fn to_raster<S: Scalar>(&self) -> Raster<S> {
        let data = self.data.iter().map(|&m| if m { S::one() } else { S::zero() }).collect();
        Raster::new(vec!["mask".to_string()], self.height, self.width, data)
            .expect("mask values are in range")
    }

    pub fn from_raster<S: Scalar>(raster: &Raster<S>) -> Result<Mask> {
        let plane = raster.band("mask")?;
        let mut data = Vec::with_capacity(plane.len());
        for &v in plane {
            if v == S::one() {
                data.push(true);
            } else if v == S::zero() {
                data.push(false);
            } else {
                return Err(Error::format("mask", format!("value {v} not in {{0,1}}")));
            }
        }
        Mask::new(raster.height, raster.width, data)
    }
}

/// Accept/reject a raster by its fraction of low-quality pixels.
/// Rejects iff the fraction strictly exceeds the threshold.
pub fn quality_filter<S: Scalar>(raster: &Raster<S>, qa: &Mask, threshold: f64) -> Result<bool> {
    if qa.height != raster.height || qa.width != raster.width {
        return Err(Error::geometry("qa mask shape does not match raster"));
    }
    let frac = qa.count_missing() as f64 / (qa.height * qa.width) as f64;
    Ok(frac <= threshold)
}

/// Mask exactly round(missing_ratio * |valid|) pixels, chosen by a seeded
/// shuffle of the valid indices. Never masks a pixel outside `valid`.
pub fn random_mask(
    shape: (usize, usize),
    missing_ratio: f64,
    seed: u64,
    valid: Option<&Mask>,
) -> Result<Mask> {
    if !(0.0..=0.95).contains(&missing_ratio) {
        return Err(Error::config(format!("missing_ratio {missing_ratio} outside [0, 0.95]")));
    }
    let (h, w) = shape;
    if let Some(v) = valid {
        if v.height != h || v.width != w {
            return Err(Error::geometry("valid mask shape mismatch"));
        }
    }
    let mut indices: Vec<usize> = (0..h * w)
        .filter(|&i| valid.map_or(true, |v| !v.data[i]))
        .collect();
    let n_valid = indices.len();
    let n_mask = (missing_ratio * n_valid as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut data = vec![false; h * w];
    for &i in &indices[..n_mask] {
        data[i] = true;
    }
    Ok(Mask {
        data,
        height: h,
        width: w,
        ratio: if n_valid == 0 { 0.0 } else { n_mask as f64 / n_valid as f64 },
        seed,
    })
}

/// Masked pixels set to `fill` on every band; unmasked pixels unchanged.
pub fn apply_mask<S: Scalar>(raster: &Raster<S>, mask: &Mask, fill: S) -> Result<Raster<S>> {
    if mask.height != raster.height || mask.width != raster.width {
        return Err(Error::geometry("mask shape does not match raster"));
    }
    let mut out = raster.clone();
    let n = raster.height * raster.width;
    for b in 0..raster.n_bands() {
        let plane = out.band_plane_mut(b);
        for i in 0..n {
            if mask.data[i] {
                plane[i] = fill;
            }
        }
    }
    Ok(out)
}
