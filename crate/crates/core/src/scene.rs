//! Procedural scenes: fractal-noise DEMs, spectral bands correlated with
//! elevation and slope, and seasonal time series. Stands in for real
//! satellite data so the full pipeline trains at desk scale.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandParams {
    /// elevation response a_b
    pub elev: f64,
    /// slope response c_b
    pub slope: f64,
    /// white-noise amplitude s_b (per-pixel, unpredictable by design)
    pub noise: f64,
    /// seasonal sinusoid amplitude
    pub seasonal: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub octaves: usize,
    pub seed: u64,
    pub band_params: BTreeMap<String, BandParams>,
    pub season_period: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        // band set mirrors the blue/green/red/nir prompt vocabulary
        let mut band_params = BTreeMap::new();
        band_params.insert("blue".into(), BandParams { elev: 0.35, slope: 0.20, noise: 0.04, seasonal: 0.05 });
        band_params.insert("green".into(), BandParams { elev: 0.45, slope: 0.25, noise: 0.05, seasonal: 0.08 });
        band_params.insert("red".into(), BandParams { elev: 0.50, slope: 0.30, noise: 0.05, seasonal: 0.06 });
        band_params.insert("nir".into(), BandParams { elev: 0.85, slope: 0.20, noise: 0.06, seasonal: 0.10 });
        SceneConfig { size: 64, octaves: 4, seed: 0, band_params, season_period: 12 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config("scene size must be >= 8"));
        }
        if self.octaves < 1 {
            return Err(Error::config("octaves must be >= 1"));
        }
        if self.season_period < 1 {
            return Err(Error::config("season_period must be >= 1"));
        }
        for (band, p) in &self.band_params {
            if p.noise < 0.0 {
                return Err(Error::config(format!("band {band}: noise amplitude must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> Vec<String> {
        self.band_params.keys().cloned().collect()
    }
}

fn mix_seed(seed: u64, salt: &str) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for b in salt.bytes() {
        h = h.wrapping_add(b as u64).wrapping_mul(0x100000001b3);
        h ^= h >> 29;
    }
    h
}

/// One octave of seeded value noise: a coarse random lattice upsampled
/// bilinearly to the target size.
fn value_noise<S: Scalar>(size: usize, cells: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lat = cells + 1;
    let lattice: Vec<f64> = (0..lat * lat).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![S::zero(); size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        let fy = y as f64 * scale;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * scale;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let v00 = lattice[y0 * lat + x0];
            let v01 = lattice[y0 * lat + x0 + 1];
            let v10 = lattice[(y0 + 1) * lat + x0];
            let v11 = lattice[(y0 + 1) * lat + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * size + x] = S::from_f64_(top + (bot - top) * ty);
        }
    }
    out
}

/// Sum of `octaves` value-noise layers with frequency doubling and amplitude
/// halving per octave, min-max normalized to [0,1].
pub fn synth_dem<S: Scalar>(cfg: &SceneConfig) -> Result<Raster<S>> {
    cfg.validate()?;
    let n = cfg.size * cfg.size;
    let mut field = vec![0.0f64; n];
    let mut amp = 1.0;
    for o in 0..cfg.octaves {
        let cells = (4 << o).min(cfg.size);
        let layer = value_noise::<f64>(cfg.size, cells, mix_seed(cfg.seed, &format!("dem-octave-{o}")));
        for (f, l) in field.iter_mut().zip(&layer) {
            *f += amp * l;
        }
        amp *= 0.5;
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = field.iter().map(|&v| S::from_f64_((v - lo) / span)).collect();
    Raster::new(vec!["dem".to_string()], cfg.size, cfg.size, data)
}

/// Central-difference gradient magnitude of a single-band field.
pub fn slope_magnitude<S: Scalar>(dem: &Raster<S>) -> Vec<S> {
    let (h, w) = (dem.height, dem.width);
    let plane = dem.band_plane(0);
    let half = S::from_f64_(0.5);
    let mut out = vec![S::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let xm = plane[y * w + x.saturating_sub(1)];
            let xp = plane[y * w + (x + 1).min(w - 1)];
            let ym = plane[y.saturating_sub(1) * w + x];
            let yp = plane[(y + 1).min(h - 1) * w + x];
            let gx = (xp - xm) * half;
            let gy = (yp - ym) * half;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

// monotone shaping functions applied to elevation and slope
fn shape_elev(v: f64) -> f64 {
    v * v * (3.0 - 2.0 * v) // smoothstep
}

fn shape_slope(s: f64) -> f64 {
    s / (s + 0.05) // saturating in slope magnitude
}

/// Band value = clip01(a_b*f(dem) + c_b*g(slope) + seasonal(phase) + s_b*noise).
pub fn synth_band<S: Scalar>(dem: &Raster<S>, band: &str, phase: f64, cfg: &SceneConfig) -> Result<Raster<S>> {
    cfg.validate()?;
    let p = cfg.band_params.get(band).ok_or_else(|| Error::Key(band.to_string()))?;
    let (h, w) = (dem.height, dem.width);
    let plane = dem.band_plane(0);
    let slope = slope_magnitude(dem);
    let seasonal = p.seasonal * (std::f64::consts::TAU * phase).sin();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &format!("band-{band}")));
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let noise: f64 = rng.gen_range(-1.0..1.0);
        let v = p.elev * shape_elev(plane[i].to_f64_())
            + p.slope * shape_slope(slope[i].to_f64_())
            + seasonal
            + p.noise * noise;
        data.push(S::from_f64_(v.clamp(0.0, 1.0)));
    }
    Raster::new(vec![band.to_string()], h, w, data)
}

/// Multi-band frames sharing one DEM; step t uses phase = t / season_period.
pub fn synth_timeseries<S: Scalar>(dem: &Raster<S>, n_steps: usize, cfg: &SceneConfig) -> Result<Vec<Raster<S>>> {
    if n_steps < 1 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    let bands = cfg.bands();
    let mut frames = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let phase = t as f64 / cfg.season_period as f64;
        let mut data = Vec::with_capacity(bands.len() * dem.height * dem.width);
        for band in &bands {
            let b = synth_band(dem, band, phase, cfg)?;
            data.extend_from_slice(b.data());
        }
        frames.push(Raster::new(bands.clone(), dem.height, dem.width, data)?);
    }
    Ok(frames)
}

pub fn pearson<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|v| v.to_f64_()).sum::<f64>() / n;
    let mb = b.iter().map(|v| v.to_f64_()).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x.to_f64_() - ma;
        let dy = y.to_f64_() - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
