//! Comparison fills: nearest-pixel copy, harmonic (Laplace) interpolation,
//! a small convolutional autoencoder, and last-frame copy for time series.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

fn check_fill_inputs<S: Scalar>(raster: &Raster<S>, mask: &Mask) -> Result<()> {
    if mask.height != raster.height || mask.width != raster.width {
        return Err(Error::geometry("mask shape does not match raster"));
    }
    if mask.count_missing() == mask.data().len() {
        return Err(Error::Reference("no unmasked pixels to fill from".into()));
    }
    Ok(())
}

/// Each masked pixel takes the value of the nearest unmasked pixel
/// (Euclidean distance, ties broken by smaller row then smaller column).
pub fn fill_nearest<S: Scalar>(raster: &Raster<S>, mask: &Mask) -> Result<Raster<S>> {
    check_fill_inputs(raster, mask)?;
    let (h, w) = (raster.height, raster.width);
    let known: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| !mask.data()[i])
        .map(|i| (i / w, i % w))
        .collect();
    let mut out = raster.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.data()[y * w + x] {
                continue;
            }
            // brute force; known pixels are already in row-then-column order,
            // so the first strict improvement realizes the tie-break
            let mut best = usize::MAX;
            let mut src = (0, 0);
            for &(ky, kx) in &known {
                let dy = ky.abs_diff(y);
                let dx = kx.abs_diff(x);
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                    src = (ky, kx);
                }
            }
            for b in 0..raster.n_bands() {
                out.set(b, y, x, raster.get(b, src.0, src.1));
            }
        }
    }
    Ok(out)
}

/// Jacobi iteration of the discrete Laplace equation on masked pixels with
/// unmasked pixels as Dirichlet boundary; stops when the max update drops
/// below `tol` or after `iters` sweeps.
pub fn fill_harmonic<S: Scalar>(raster: &Raster<S>, mask: &Mask, iters: usize, tol: f64) -> Result<Raster<S>> {
    check_fill_inputs(raster, mask)?;
    let (h, w) = (raster.height, raster.width);
    let mut out = raster.clone();
    // seed masked pixels with the unmasked mean for faster convergence
    for b in 0..raster.n_bands() {
        let (mut acc, mut n) = (S::zero(), 0usize);
        for (i, &m) in mask.data().iter().enumerate() {
            if !m {
                acc += raster.band_plane(b)[i];
                n += 1;
            }
        }
        let mean = acc / S::from_usize_(n);
        let plane = out.band_plane_mut(b);
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                plane[i] = mean;
            }
        }
    }
    let tol = S::from_f64_(tol);
    for b in 0..raster.n_bands() {
        for _ in 0..iters {
            let prev = out.band_plane(b).to_vec();
            let mut max_update = S::zero();
            let plane = out.band_plane_mut(b);
            for y in 0..h {
                for x in 0..w {
                    if !mask.data()[y * w + x] {
                        continue;
                    }
                    // von Neumann boundary at image edges: mirror by dropping
                    let mut acc = S::zero();
                    let mut n = 0usize;
                    if y > 0 {
                        acc += prev[(y - 1) * w + x];
                        n += 1;
                    }
                    if y + 1 < h {
                        acc += prev[(y + 1) * w + x];
                        n += 1;
                    }
                    if x > 0 {
                        acc += prev[y * w + x - 1];
                        n += 1;
                    }
                    if x + 1 < w {
                        acc += prev[y * w + x + 1];
                        n += 1;
                    }
                    let v = acc / S::from_usize_(n);
                    max_update = max_update.max((v - prev[y * w + x]).abs());
                    plane[y * w + x] = v;
                }
            }
            if max_update < tol {
                break;
            }
        }
    }
    Ok(out)
}

/// Task-2 temporal baseline: masked pixels copied from the previous frame.
pub fn fill_last_frame<S: Scalar>(current: &Raster<S>, previous: &Raster<S>, mask: &Mask) -> Result<Raster<S>> {
    if current.height != previous.height
        || current.width != previous.width
        || current.n_bands() != previous.n_bands()
    {
        return Err(Error::geometry("frame shapes differ"));
    }
    if mask.height != current.height || mask.width != current.width {
        return Err(Error::geometry("mask shape does not match raster"));
    }
    let mut out = current.clone();
    let n = current.height * current.width;
    for b in 0..current.n_bands() {
        let src = previous.band_plane(b).to_vec();
        let plane = out.band_plane_mut(b);
        for i in 0..n {
            if mask.data()[i] {
                plane[i] = src[i];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// convolutional autoencoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeConfig {
    /// encoder widths; the last entry is the bottleneck width
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { widths: vec![8, 16], epochs: 30, lr: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AutoencoderParams<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub widths: Vec<usize>,
    pub seed: u64,
}

fn ae_init<S: Scalar>(widths: &[usize], seed: u64) -> BTreeMap<String, Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = BTreeMap::new();
    let mut conv = |name: &str, o: usize, c: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, (2.0 / (c * 9) as f64).sqrt()).unwrap();
        t.insert(
            format!("{name}.w"),
            Tensor::new(&[o, c, 3, 3], (0..o * c * 9).map(|_| S::from_f64_(normal.sample(rng))).collect()),
        );
        t.insert(format!("{name}.b"), Tensor::zeros(&[o]));
    };
    let mut cin = 1;
    for (i, &wd) in widths.iter().enumerate() {
        conv(&format!("enc{i}"), wd, cin, &mut rng);
        cin = wd;
    }
    for (i, &wd) in widths.iter().enumerate().rev().skip(1) {
        conv(&format!("dec{i}"), wd, cin, &mut rng);
        cin = wd;
    }
    conv("out", 1, cin, &mut rng);
    t
}

fn ae_forward<'t, S: Scalar>(
    vars: &BTreeMap<String, Var<'t, S>>,
    widths: &[usize],
    x: Var<'t, S>,
) -> Var<'t, S> {
    let mut h = x;
    for i in 0..widths.len() {
        h = h.conv2d(vars[&format!("enc{i}.w")], vars[&format!("enc{i}.b")]).silu();
        if i + 1 < widths.len() {
            h = h.avg_pool2();
        }
    }
    for i in (0..widths.len() - 1).rev() {
        h = h.upsample2();
        h = h.conv2d(vars[&format!("dec{i}.w")], vars[&format!("dec{i}.b")]).silu();
    }
    h.conv2d(vars["out.w"], vars["out.b"])
}

/// Mean-squared reconstruction training of (masked input, truth) pairs.
pub fn train_autoencoder<S: Scalar>(
    dataset: &[(Raster<S>, Raster<S>)],
    cfg: &AeConfig,
) -> Result<AutoencoderParams<S>> {
    if dataset.is_empty() {
        return Err(Error::config("autoencoder dataset is empty"));
    }
    if cfg.widths.is_empty() || cfg.lr <= 0.0 {
        return Err(Error::config("autoencoder config invalid"));
    }
    for (x, t) in dataset {
        if x.n_bands() != 1 || t.n_bands() != 1 || x.height != t.height || x.width != t.width {
            return Err(Error::geometry("autoencoder pairs must be matching single-band rasters"));
        }
        let div = 1usize << (cfg.widths.len() - 1);
        if x.height % div != 0 || x.width % div != 0 {
            return Err(Error::size(format!("tile extents must be divisible by {div}")));
        }
    }
    let mut tensors = ae_init::<S>(&cfg.widths, cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851f42d4c957f2d);
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &idx in &order {
            let (x, t) = &dataset[idx];
            let tape = Tape::new();
            let vars: BTreeMap<String, Var<'_, S>> =
                tensors.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect();
            let input = tape.var(Tensor::new(&[1, x.height, x.width], x.data().to_vec()));
            let truth = tape.var(Tensor::new(&[1, t.height, t.width], t.data().to_vec()));
            let loss = ae_forward(&vars, &cfg.widths, input).sub(truth).square().mean();
            if !loss.value().item().is_finite() {
                return Err(Error::Divergence { component: "autoencoder".into() });
            }
            let grads = tape.backward(loss);
            for (name, var) in &vars {
                if let Some(g) = grads.get(*var) {
                    let w = tensors.get_mut(name).unwrap();
                    for (p, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *p -= S::from_f64_(cfg.lr) * *gv;
                    }
                }
            }
        }
    }
    Ok(AutoencoderParams { tensors, widths: cfg.widths.clone(), seed: cfg.seed })
}

/// Mean per-pair reconstruction loss with the given parameters, for curves.
pub fn ae_loss<S: Scalar>(params: &AutoencoderParams<S>, dataset: &[(Raster<S>, Raster<S>)]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::config("autoencoder dataset is empty"));
    }
    let mut total = 0.0;
    for (x, t) in dataset {
        let tape = Tape::new();
        let vars: BTreeMap<String, Var<'_, S>> =
            params.tensors.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect();
        let input = tape.var(Tensor::new(&[1, x.height, x.width], x.data().to_vec()));
        let truth = tape.var(Tensor::new(&[1, t.height, t.width], t.data().to_vec()));
        total += ae_forward(&vars, &params.widths, input)
            .sub(truth)
            .square()
            .mean()
            .value()
            .item()
            .to_f64_();
    }
    Ok(total / dataset.len() as f64)
}

/// Composite: unmasked pixels from the input, masked pixels from the decoder.
pub fn ae_fill<S: Scalar>(params: &AutoencoderParams<S>, raster: &Raster<S>, mask: &Mask) -> Result<Raster<S>> {
    check_fill_inputs(raster, mask)?;
    if raster.n_bands() != 1 {
        return Err(Error::geometry("autoencoder fill takes single-band rasters"));
    }
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_, S>> =
        params.tensors.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect();
    let input = tape.var(Tensor::new(&[1, raster.height, raster.width], raster.data().to_vec()));
    let decoded = ae_forward(&vars, &params.widths, input).value();
    let mut out = raster.clone();
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            out.data_mut()[i] = decoded.data()[i].max(S::zero()).min(S::one());
        }
    }
    Ok(out)
}

pub fn save_autoencoder<S: Scalar>(params: &AutoencoderParams<S>, path: impl AsRef<std::path::Path>) -> Result<()> {
    crate::checkpoint::save(
        path,
        "autoencoder",
        serde_json::json!({"widths": params.widths, "seed": params.seed}),
        &params.tensors,
    )
}

pub fn load_autoencoder<S: Scalar>(path: impl AsRef<std::path::Path>) -> Result<AutoencoderParams<S>> {
    let (meta, tensors) = crate::checkpoint::load(path, "autoencoder")?;
    let widths = meta["widths"]
        .as_array()
        .ok_or_else(|| Error::format("widths", "missing"))?
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let seed = meta["seed"].as_u64().unwrap_or(0);
    Ok(AutoencoderParams { tensors, widths, seed })
}
