//! Fixed feature extractor, Gram-matrix style loss, RKHS distribution loss
//! (Gaussian-kernel MMD), total loss, and the inference-time adaptation
//! pass that corrects distribution and color shift in generated regions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::fill_harmonic;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Style-layer weights: lower taps (finer texture) weigh more.
pub const LAYER_WEIGHTS: [f64; 5] = [1.0, 0.8, 0.5, 0.3, 0.1];

/// Frozen seeded convolutional extractor. Five style taps at strictly
/// decreasing resolution plus one content tap, mirroring the
/// conv1_1..conv5_1 / conv4_2 topology of classic style transfer.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<S> {
    pub stage_channels: Vec<usize>,
    pub layer_weights: Vec<f64>,
    pub seed: u64,
    weights: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(seed: u64) -> Self {
        Self::with_config(&[16, 32, 64, 96, 128], &LAYER_WEIGHTS, seed)
    }

    /// Reduced-depth extractor for small probe images.
    pub fn with_stages(stages: usize, seed: u64) -> Self {
        let channels: Vec<usize> = (0..stages).map(|i| 16 << i.min(3)).collect();
        let weights: Vec<f64> = LAYER_WEIGHTS[..stages].to_vec();
        Self::with_config(&channels, &weights, seed)
    }

    pub fn with_config(stage_channels: &[usize], layer_weights: &[f64], seed: u64) -> Self {
        assert!(stage_channels.len() >= 2, "extractor needs at least 2 stages");
        assert_eq!(stage_channels.len(), layer_weights.len());
        assert!(
            stage_channels.windows(2).all(|w| w[1] >= w[0]),
            "channel counts must be non-decreasing"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        let mut cin = 1;
        for (i, &ch) in stage_channels.iter().enumerate() {
            let fan_in = cin * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            weights.insert(
                format!("stage{i}.w"),
                Tensor::new(&[ch, cin, 3, 3], (0..ch * cin * 9).map(|_| S::from_f64_(normal.sample(&mut rng))).collect()),
            );
            cin = ch;
        }
        // content tap follows the second-to-last style tap at its resolution
        let c = stage_channels[stage_channels.len() - 2];
        let normal = Normal::new(0.0, (2.0 / (c * 9) as f64).sqrt()).unwrap();
        weights.insert(
            "content.w".to_string(),
            Tensor::new(&[c, c, 3, 3], (0..c * c * 9).map(|_| S::from_f64_(normal.sample(&mut rng))).collect()),
        );
        FeatureExtractor {
            stage_channels: stage_channels.to_vec(),
            layer_weights: layer_weights.to_vec(),
            seed,
            weights,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.stages() - 1);
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::size(format!(
                "image {h}x{w} too small or not divisible by {div} for a {}-stage extractor",
                self.stages()
            )));
        }
        Ok(())
    }

    /// Bind the frozen weights to a tape as constants.
    pub fn vars<'t>(&self, tape: &'t Tape<S>) -> BTreeMap<String, Var<'t, S>> {
        self.weights.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect()
    }

    /// Differentiable forward pass; `img` is [1,H,W]. Returns the style tap
    /// vars (finest first) and the content tap var.
    pub fn extract_vars<'t>(
        &self,
        tape: &'t Tape<S>,
        wvars: &BTreeMap<String, Var<'t, S>>,
        img: Var<'t, S>,
    ) -> Result<(Vec<Var<'t, S>>, Var<'t, S>)> {
        let shape = img.shape();
        self.check_input(shape[1], shape[2])?;
        let zero_bias = |ch: usize| tape.var(Tensor::zeros(&[ch]));
        let mut taps = Vec::with_capacity(self.stages());
        let mut h = img;
        let mut content = None;
        for i in 0..self.stages() {
            let ch = self.stage_channels[i];
            h = h.conv2d(wvars[&format!("stage{i}.w")], zero_bias(ch)).silu();
            taps.push(h);
            if i == self.stages() - 2 {
                let c = h.conv2d(wvars["content.w"], zero_bias(ch)).silu();
                content = Some(c);
            }
            if i + 1 < self.stages() {
                h = h.avg_pool2();
            }
        }
        Ok((taps, content.expect("stages >= 2")))
    }

    pub fn extract(&self, image: &Raster<S>) -> Result<FeatureStack<S>> {
        if image.n_bands() != 1 {
            return Err(Error::geometry("extractor input must be single-band"));
        }
        let tape = Tape::new();
        let wvars = self.vars(&tape);
        let img = tape.var(Tensor::new(&[1, image.height, image.width], image.data().to_vec()));
        let (taps, content) = self.extract_vars(&tape, &wvars, img)?;
        Ok(FeatureStack {
            style: taps.iter().map(|t| (*t.value()).clone()).collect(),
            content: (*content.value()).clone(),
            layer_weights: self.layer_weights.clone(),
        })
    }
}

/// Per-tap feature maps with shapes (C_l, H_l, W_l).
#[derive(Clone, Debug)]
pub struct FeatureStack<S> {
    pub style: Vec<Tensor<S>>,
    pub content: Tensor<S>,
    pub layer_weights: Vec<f64>,
}

/// G[i][j] = sum_p F_i[p] * F_j[p], channels flattened over space.
pub fn gram<S: Scalar>(feat: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let flat = feat.reshaped(&[c, h * w]);
    crate::tensor::matmul_nt(&flat, &flat)
}

fn gram_var<'t, S: Scalar>(feat: Var<'t, S>) -> (Var<'t, S>, usize, usize) {
    let shape = feat.shape();
    let (c, m) = (shape[0], shape[1] * shape[2]);
    let flat = feat.reshape(&[c, m]);
    (flat.matmul_nt(flat), c, m)
}

/// sum_l w_l / (4 C_l^2 H_l^2 W_l^2) * ||G_gen^l - G_ref^l||_F^2.
pub fn style_loss<S: Scalar>(gen: &FeatureStack<S>, reference: &FeatureStack<S>, weights: &[f64]) -> Result<S> {
    if gen.style.len() != reference.style.len() || gen.style.len() != weights.len() {
        return Err(Error::geometry("feature stacks have different tap counts"));
    }
    let mut total = S::zero();
    for ((fg, fr), &w) in gen.style.iter().zip(&reference.style).zip(weights) {
        if fg.shape() != fr.shape() {
            return Err(Error::geometry("tap shapes differ between stacks"));
        }
        let (c, m) = (fg.shape()[0], fg.shape()[1] * fg.shape()[2]);
        let diff = gram(fg).sub(&gram(fr));
        let frob2: S = diff.data().iter().map(|&v| v * v).sum();
        let norm = 4.0 * (c * c) as f64 * (m * m) as f64;
        total += frob2 * S::from_f64_(w / norm);
    }
    Ok(total)
}

fn style_loss_var<'t, S: Scalar>(
    tape: &'t Tape<S>,
    gen_taps: &[Var<'t, S>],
    ref_grams: &[Tensor<S>],
    weights: &[f64],
) -> Var<'t, S> {
    let mut total = tape.var(Tensor::scalar(S::zero()));
    for ((&fg, gr), &w) in gen_taps.iter().zip(ref_grams).zip(weights) {
        let (g, c, m) = gram_var(fg);
        let gref = tape.var(gr.clone());
        let norm = 4.0 * (c * c) as f64 * (m * m) as f64;
        let term = g.sub(gref).square().sum().scale(S::from_f64_(w / norm));
        total = total.add(term);
    }
    total
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Sigma {
    Fixed(f64),
    MedianHeuristic,
}

/// Gaussian kernel exp(-||u-v||^2 / (2 sigma^2)) over an implicit RKHS.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: Sigma,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { sigma: Sigma::MedianHeuristic }
    }
}

impl KernelConfig {
    /// Resolve sigma; the median heuristic uses pairwise distances among
    /// the reference samples.
    pub fn resolve<S: Scalar>(&self, reference: &Tensor<S>) -> Result<f64> {
        match self.sigma {
            Sigma::Fixed(s) => {
                if s <= 0.0 {
                    return Err(Error::config("sigma must be > 0"));
                }
                Ok(s)
            }
            Sigma::MedianHeuristic => {
                let (n, d) = (reference.shape()[0], reference.shape()[1]);
                let mut dists = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        let mut acc = 0.0f64;
                        for p in 0..d {
                            let diff =
                                reference.data()[i * d + p].to_f64_() - reference.data()[j * d + p].to_f64_();
                            acc += diff * diff;
                        }
                        dists.push(acc.sqrt());
                    }
                }
                if dists.is_empty() {
                    return Ok(1.0);
                }
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = dists[dists.len() / 2];
                Ok(if med > 0.0 { med } else { 1.0 })
            }
        }
    }
}

fn kernel_sum<S: Scalar>(xs: &Tensor<S>, ys: &Tensor<S>, sigma: f64) -> f64 {
    let (n, d) = (xs.shape()[0], xs.shape()[1]);
    let m = ys.shape()[0];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for i in 0..n {
        let xi = &xs.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &ys.data()[j * d..(j + 1) * d];
            let mut sq = 0.0;
            for (a, b) in xi.iter().zip(yj) {
                let diff = a.to_f64_() - b.to_f64_();
                sq += diff * diff;
            }
            total += (-sq * inv).exp();
        }
    }
    total
}

/// Biased V-statistic MMD^2 between two sample matrices [n,d] and [m,d],
/// clamped at zero to absorb rounding.
pub fn mmd<S: Scalar>(xs: &Tensor<S>, ys: &Tensor<S>, k: &KernelConfig) -> Result<S> {
    if xs.shape().len() != 2 || ys.shape().len() != 2 || xs.shape()[1] != ys.shape()[1] {
        return Err(Error::geometry("mmd inputs must be [n,d] and [m,d] with equal d"));
    }
    if xs.shape()[0] == 0 || ys.shape()[0] == 0 {
        return Err(Error::geometry("mmd inputs must be non-empty"));
    }
    let sigma = k.resolve(ys)?;
    let n = xs.shape()[0] as f64;
    let m = ys.shape()[0] as f64;
    let v = kernel_sum(xs, xs, sigma) / (n * n) + kernel_sum(ys, ys, sigma) / (m * m)
        - 2.0 * kernel_sum(xs, ys, sigma) / (n * m);
    Ok(S::from_f64_(v.max(0.0)))
}

/// Fused MMD node with analytic gradients wrt both sample matrices.
pub fn mmd_var<'t, S: Scalar>(
    tape: &'t Tape<S>,
    xs: Var<'t, S>,
    ys: Var<'t, S>,
    sigma: f64,
) -> Var<'t, S> {
    let xv = xs.value();
    let yv = ys.value();
    let (n, d) = (xv.shape()[0], xv.shape()[1]);
    let m = yv.shape()[0];
    let (nf, mf) = (n as f64, m as f64);
    let value = kernel_sum(&xv, &xv, sigma) / (nf * nf) + kernel_sum(&yv, &yv, sigma) / (mf * mf)
        - 2.0 * kernel_sum(&xv, &yv, sigma) / (nf * mf);
    let inv = 1.0 / (sigma * sigma);
    tape.push_op(Tensor::scalar(S::from_f64_(value)), &[xs, ys], move |g| {
        let go = g.item().to_f64_();
        let pair_grad = |u: &Tensor<S>, v: &Tensor<S>, coef: f64, gu: &mut [f64]| {
            // d/du_i of sum_j k(u_i, v_j), both orders already folded into coef
            let rows_u = u.shape()[0];
            let rows_v = v.shape()[0];
            for i in 0..rows_u {
                let ui = &u.data()[i * d..(i + 1) * d];
                for j in 0..rows_v {
                    let vj = &v.data()[j * d..(j + 1) * d];
                    let mut sq = 0.0;
                    for (a, b) in ui.iter().zip(vj) {
                        let diff = a.to_f64_() - b.to_f64_();
                        sq += diff * diff;
                    }
                    let kij = (-sq / (2.0 * sigma * sigma)).exp();
                    for p in 0..d {
                        let diff = vj[p].to_f64_() - ui[p].to_f64_();
                        gu[i * d + p] += coef * kij * diff * inv;
                    }
                }
            }
        };
        let mut gx = vec![0.0f64; n * d];
        let mut gy = vec![0.0f64; m * d];
        // xx term: each unordered pair appears twice in the V-statistic
        pair_grad(&xv, &xv, go * 2.0 / (nf * nf), &mut gx);
        pair_grad(&yv, &yv, go * 2.0 / (mf * mf), &mut gy);
        pair_grad(&xv, &yv, -go * 2.0 / (nf * mf), &mut gx);
        pair_grad(&yv, &xv, -go * 2.0 / (nf * mf), &mut gy);
        vec![
            Tensor::new(&[n, d], gx.into_iter().map(S::from_f64_).collect()),
            Tensor::new(&[m, d], gy.into_iter().map(S::from_f64_).collect()),
        ]
    })
}

/// Content-tap feature map reorganized as one sample per spatial position.
pub fn content_samples<S: Scalar>(content: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (content.shape()[0], content.shape()[1], content.shape()[2]);
    crate::tensor::transpose2(&content.reshaped(&[c, h * w]))
}

/// MMD between the content-tap sample sets of two images.
pub fn distribution_loss<S: Scalar>(
    gen: &Raster<S>,
    reference: &Raster<S>,
    ex: &FeatureExtractor<S>,
    k: &KernelConfig,
) -> Result<S> {
    let gs = ex.extract(gen)?;
    let rs = ex.extract(reference)?;
    mmd(&content_samples(&gs.content), &content_samples(&rs.content), k)
}

/// L_total = L_recon + L_dis + lambda_style * L_style.
pub fn total_loss<S: Scalar>(recon: S, dis: S, style: S, lambda_style: f64) -> Result<S> {
    for (name, v) in [("recon", recon), ("dis", dis), ("style", style)] {
        if !v.is_finite() || v < S::zero() {
            return Err(Error::contract(format!("loss component {name} = {v} invalid")));
        }
    }
    Ok(recon + dis + S::from_f64_(lambda_style) * style)
}

/// Fixed (non-differentiated) reference statistics: per-tap Gram matrices,
/// content-tap sample set, and the resolved kernel bandwidth.
#[derive(Clone, Debug)]
pub struct StyleTargets<S> {
    pub grams: Vec<Tensor<S>>,
    pub samples: Tensor<S>,
    pub sigma: f64,
}

pub fn style_targets<S: Scalar>(
    ex: &FeatureExtractor<S>,
    reference: &Raster<S>,
    k: &KernelConfig,
) -> Result<StyleTargets<S>> {
    let stack = ex.extract(reference)?;
    let samples = content_samples(&stack.content);
    let sigma = k.resolve(&samples)?;
    Ok(StyleTargets { grams: stack.style.iter().map(gram).collect(), samples, sigma })
}

/// Differentiable (distribution, style) loss terms of `img` against fixed
/// target statistics.
pub fn perceptual_terms_var<'t, S: Scalar>(
    tape: &'t Tape<S>,
    ex: &FeatureExtractor<S>,
    wvars: &BTreeMap<String, Var<'t, S>>,
    img: Var<'t, S>,
    targets: &StyleTargets<S>,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let (taps, content) = ex.extract_vars(tape, wvars, img)?;
    let shape = content.shape();
    let samples = content.reshape(&[shape[0], shape[1] * shape[2]]).transpose2();
    let dis = mmd_var(tape, samples, tape.var(targets.samples.clone()), targets.sigma);
    let style = style_loss_var(tape, &taps, &targets.grams, &ex.layer_weights);
    Ok((dis, style))
}

/// The adaptation objective on the tape: distribution loss plus weighted
/// style loss of `img` against fixed target statistics.
fn adapt_objective<'t, S: Scalar>(
    tape: &'t Tape<S>,
    ex: &FeatureExtractor<S>,
    wvars: &BTreeMap<String, Var<'t, S>>,
    img: Var<'t, S>,
    targets: &StyleTargets<S>,
    lambda_style: f64,
) -> Result<Var<'t, S>> {
    let (dis, style) = perceptual_terms_var(tape, ex, wvars, img, targets)?;
    Ok(dis.add(style.scale(S::from_f64_(lambda_style))))
}

/// Gradient descent on the masked pixels of `generated`, pulling their
/// feature statistics toward the reference. The reference content under the
/// mask is never trusted: it is harmonically filled from the unmasked
/// region before target statistics are computed. Unmasked pixels of the
/// output are bitwise those of `generated`.
#[allow(clippy::too_many_arguments)]
pub fn adapt<S: Scalar>(
    generated: &Raster<S>,
    reference: &Raster<S>,
    mask: &Mask,
    steps: usize,
    step_size: f64,
    ex: &FeatureExtractor<S>,
    k: &KernelConfig,
    lambda_style: f64,
) -> Result<Raster<S>> {
    if generated.n_bands() != 1 || reference.n_bands() != 1 {
        return Err(Error::geometry("adapt operates on single-band rasters"));
    }
    if generated.height != reference.height || generated.width != reference.width {
        return Err(Error::geometry("generated/reference shape mismatch"));
    }
    if mask.height != generated.height || mask.width != generated.width {
        return Err(Error::geometry("mask shape mismatch"));
    }
    if mask.count_missing() == mask.data().len() {
        return Err(Error::Reference("no unmasked reference pixels".into()));
    }
    let target = fill_harmonic(reference, mask, 2000, 1e-7)?;
    let targets = style_targets(ex, &target, k)?;

    let mut current: Vec<S> = generated.data().to_vec();
    let (h, w) = (generated.height, generated.width);
    let evaluate = |data: &[S]| -> Result<S> {
        let tape = Tape::new();
        let wvars = ex.vars(&tape);
        let img = tape.var(Tensor::new(&[1, h, w], data.to_vec()));
        let obj = adapt_objective(&tape, ex, &wvars, img, &targets, lambda_style)?;
        Ok(obj.value().item())
    };
    let initial_obj = evaluate(&current)?;
    let mut best_obj = initial_obj;

    for _ in 0..steps {
        let tape = Tape::new();
        let wvars = ex.vars(&tape);
        let img = tape.var(Tensor::new(&[1, h, w], current.clone()));
        let obj = adapt_objective(&tape, ex, &wvars, img, &targets, lambda_style)?;
        let grads = tape.backward(obj);
        let g = grads.get(img).expect("image participates in the objective");
        let mut gmax = S::zero();
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                gmax = gmax.max(g.data()[i].abs());
            }
        }
        if gmax <= S::zero() {
            break;
        }
        // normalized step with backtracking so the objective never increases
        let mut factor = 1.0f64;
        let mut accepted = false;
        for _ in 0..8 {
            let scale = S::from_f64_(step_size * factor) / gmax;
            let mut trial = current.clone();
            for (i, &m) in mask.data().iter().enumerate() {
                if m {
                    trial[i] = (trial[i] - scale * g.data()[i]).max(S::zero()).min(S::one());
                }
            }
            let trial_obj = evaluate(&trial)?;
            if trial_obj <= best_obj {
                current = trial;
                best_obj = trial_obj;
                accepted = true;
                break;
            }
            factor *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    debug_assert!(best_obj <= initial_obj);
    Raster::new(generated.bands.clone(), h, w, current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Raster<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Raster::new(vec!["g".into()], h, w, data).unwrap()
    }

    #[test]
    fn extractor_deterministic_and_frozen() {
        let ex = FeatureExtractor::<f64>::new(3);
        let img = image(32, 32, 1);
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&img).unwrap();
        for (x, y) in a.style.iter().zip(&b.style) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.content.data(), b.content.data());
    }

    #[test]
    fn extractor_zero_image_zero_stacks() {
        let ex = FeatureExtractor::<f64>::new(3);
        let img = Raster::<f64>::constant(vec!["g".into()], 32, 32, 0.0);
        let stack = ex.extract(&img).unwrap();
        for tap in &stack.style {
            assert!(tap.data().iter().all(|&v| v == 0.0));
        }
        assert!(stack.content.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_shapes_follow_stride_arithmetic() {
        let ex = FeatureExtractor::<f64>::new(3);
        let stack = ex.extract(&image(64, 64, 2)).unwrap();
        let sizes: Vec<(usize, usize, usize)> =
            stack.style.iter().map(|t| (t.shape()[0], t.shape()[1], t.shape()[2])).collect();
        assert_eq!(sizes, vec![(16, 64, 64), (32, 32, 32), (64, 16, 16), (96, 8, 8), (128, 4, 4)]);
        assert_eq!(stack.content.shape(), &[96, 8, 8]);
        // spatial strictly decreasing, channels non-decreasing
        for w in sizes.windows(2) {
            assert!(w[1].1 < w[0].1 && w[1].0 >= w[0].0);
        }
    }

    #[test]
    fn extractor_rejects_small_input() {
        let ex = FeatureExtractor::<f64>::new(3);
        assert!(matches!(ex.extract(&image(8, 8, 2)), Err(Error::Size(_))));
    }

    #[test]
    fn gram_known_values() {
        // C=1, F=(1,2,3,4) -> G=[[30]]
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gram(&f).data(), &[30.0]);
        // two orthonormal channel vectors -> identity
        let f = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram(&f).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gram_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let c = rng.gen_range(1usize..5);
            let f = Tensor::<f64>::new(
                &[c, 2, 3],
                (0..c * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let g = gram(&f);
            for i in 0..c {
                for j in 0..c {
                    assert!((g.data()[i * c + j] - g.data()[j * c + i]).abs() < 1e-12);
                }
            }
            // PSD via quadratic form on random probes
            for _ in 0..10 {
                let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut q = 0.0;
                for i in 0..c {
                    for j in 0..c {
                        q += v[i] * g.data()[i * c + j] * v[j];
                    }
                }
                assert!(q >= -1e-9);
            }
        }
    }

    #[test]
    fn style_loss_values() {
        let ex = FeatureExtractor::<f64>::new(3);
        let img = image(32, 32, 4);
        let s = ex.extract(&img).unwrap();
        assert_eq!(style_loss(&s, &s, &ex.layer_weights).unwrap(), 0.0);
        // single layer C=1, M=1: G_gen=[[9]] from F=3, G_ref=[[0]],
        // squared Frobenius difference 81, normalizer 4 -> 20.25
        let gen = FeatureStack {
            style: vec![Tensor::new(&[1, 1, 1], vec![3.0])],
            content: Tensor::zeros(&[1, 1, 1]),
            layer_weights: vec![1.0],
        };
        let refr = FeatureStack {
            style: vec![Tensor::new(&[1, 1, 1], vec![0.0])],
            content: Tensor::zeros(&[1, 1, 1]),
            layer_weights: vec![1.0],
        };
        assert_eq!(style_loss(&gen, &refr, &[1.0]).unwrap(), 20.25);
    }

    #[test]
    fn style_loss_scaling_algebra() {
        // G(2F) = 4 G(F), so the Frobenius difference against G_ref=0
        // grows by 16 while the normalization is unchanged
        let f = Tensor::new(&[2, 2, 2], vec![0.3, -0.1, 0.7, 0.2, 0.5, 0.9, -0.4, 0.1]);
        let zero = FeatureStack {
            style: vec![Tensor::zeros(&[2, 2, 2])],
            content: Tensor::zeros(&[1, 1, 1]),
            layer_weights: vec![1.0],
        };
        let mk = |t: &Tensor<f64>| FeatureStack {
            style: vec![t.clone()],
            content: Tensor::zeros(&[1, 1, 1]),
            layer_weights: vec![1.0],
        };
        let l1 = style_loss(&mk(&f), &zero, &[1.0]).unwrap();
        let l2 = style_loss(&mk(&f.scale(2.0)), &zero, &[1.0]).unwrap();
        assert!((l2 / l1 - 16.0).abs() < 1e-9);
    }

    #[test]
    fn mmd_identities() {
        let k = KernelConfig { sigma: Sigma::Fixed(0.7) };
        let xs = Tensor::<f64>::new(&[3, 2], vec![0.1, 0.2, 0.5, 0.4, 0.9, 0.0]);
        assert_eq!(mmd(&xs, &xs, &k).unwrap(), 0.0);
        // symmetric with fixed sigma
        let ys = Tensor::new(&[2, 2], vec![0.3, 0.3, 0.6, 0.1]);
        let a = mmd(&xs, &ys, &k).unwrap();
        let b = mmd(&ys, &xs, &k).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn mmd_singleton_closed_form() {
        // ||x-y||^2 = 2 sigma^2 -> 2 - 2 e^{-1}
        let sigma = 0.6f64;
        let dist2 = 2.0 * sigma * sigma;
        let xs = Tensor::new(&[1, 1], vec![0.0]);
        let ys = Tensor::new(&[1, 1], vec![dist2.sqrt()]);
        let v = mmd(&xs, &ys, &KernelConfig { sigma: Sigma::Fixed(sigma) }).unwrap();
        assert!((v - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-9);
    }

    #[test]
    fn mmd_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..20 {
            let d = rng.gen_range(1usize..4);
            let n = rng.gen_range(1usize..6);
            let m = rng.gen_range(1usize..6);
            let xs = Tensor::<f64>::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let ys = Tensor::<f64>::new(&[m, d], (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let sigma = rng.gen_range(0.3..2.0);
            // independent double-loop kernel-sum oracle
            let kf = |a: &[f64], b: &[f64]| {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-sq / (2.0 * sigma * sigma)).exp()
            };
            let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for i in 0..n {
                for j in 0..n {
                    xx += kf(&row(&xs, i), &row(&xs, j));
                }
            }
            for i in 0..m {
                for j in 0..m {
                    yy += kf(&row(&ys, i), &row(&ys, j));
                }
            }
            for i in 0..n {
                for j in 0..m {
                    xy += kf(&row(&xs, i), &row(&ys, j));
                }
            }
            let oracle = (xx / (n * n) as f64 + yy / (m * m) as f64 - 2.0 * xy / (n * m) as f64).max(0.0);
            let got = mmd(&xs, &ys, &KernelConfig { sigma: Sigma::Fixed(sigma) }).unwrap();
            assert!((got - oracle).abs() < 1e-12, "trial {trial}: {got} vs {oracle}");
        }
    }

    #[test]
    fn distribution_loss_brightness_monotone() {
        let ex = FeatureExtractor::<f64>::new(5);
        let base = image(32, 32, 6);
        let k = KernelConfig::default();
        assert_eq!(distribution_loss(&base, &base, &ex, &k).unwrap(), 0.0);
        let shifted = |s: f64| {
            let data = base.data().iter().map(|&v| (v + s).clamp(0.0, 1.0)).collect();
            Raster::new(vec!["g".into()], 32, 32, data).unwrap()
        };
        let mut prev = 0.0;
        for s in [0.05, 0.1, 0.2] {
            let v = distribution_loss(&shifted(s), &base, &ex, &k).unwrap();
            assert!(v > prev, "shift {s}: {v} not > {prev}");
            prev = v;
        }
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 100.0).unwrap(), 0.0);
        let v = total_loss(0.5, 0.1, 0.002, 100.0).unwrap();
        assert!((v - 0.8f64).abs() < 1e-12);
        assert_eq!(total_loss(0.3, 0.2, 5.0, 0.0).unwrap(), 0.5);
        assert!(total_loss(-0.1, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn style_and_distribution_pixel_gradients_match_fd() {
        // 1e-3 relative on an 8x8 probe with a reduced-depth extractor
        let ex = FeatureExtractor::<f64>::with_stages(3, 9);
        let base = image(8, 8, 13);
        let target = image(8, 8, 14);
        let mut targets =
            style_targets(&ex, &target, &KernelConfig { sigma: Sigma::Fixed(0.8) }).unwrap();
        targets.sigma = 0.8;

        let eval = |data: &[f64], lambda: f64| {
            let tape = Tape::new();
            let wvars = ex.vars(&tape);
            let img = tape.var(Tensor::new(&[1, 8, 8], data.to_vec()));
            adapt_objective(&tape, &ex, &wvars, img, &targets, lambda).unwrap().value().item()
        };
        for lambda in [0.0, 100.0] {
            let tape = Tape::new();
            let wvars = ex.vars(&tape);
            let img = tape.var(Tensor::new(&[1, 8, 8], base.data().to_vec()));
            let obj = adapt_objective(&tape, &ex, &wvars, img, &targets, lambda).unwrap();
            let grads = tape.backward(obj);
            let g = grads.get(img).unwrap();
            let eps = 1e-5;
            for idx in [3, 20, 45, 63] {
                let mut plus = base.data().to_vec();
                plus[idx] += eps;
                let mut minus = base.data().to_vec();
                minus[idx] -= eps;
                let fd = (eval(&plus, lambda) - eval(&minus, lambda)) / (2.0 * eps);
                let analytic = g.data()[idx];
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-3,
                    "lambda {lambda} idx {idx}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn adapt_identity_and_mask_restriction() {
        let ex = FeatureExtractor::<f64>::with_stages(3, 9);
        let k = KernelConfig::default();
        let reference = image(16, 16, 21);
        let mask = crate::mask::random_mask((16, 16), 0.4, 5, None).unwrap();
        let generated = {
            let data = reference
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| if m { (v + 0.2).clamp(0.0, 1.0) } else { v })
                .collect();
            Raster::new(vec!["g".into()], 16, 16, data).unwrap()
        };
        let out0 = adapt(&generated, &reference, &mask, 0, 0.01, &ex, &k, 100.0).unwrap();
        assert_eq!(out0.data(), generated.data());
        let out = adapt(&generated, &reference, &mask, 10, 0.01, &ex, &k, 100.0).unwrap();
        for (i, &m) in mask.data().iter().enumerate() {
            if !m {
                assert_eq!(out.data()[i], generated.data()[i]);
            }
        }
    }

    #[test]
    fn adapt_rejects_fully_masked() {
        let ex = FeatureExtractor::<f64>::with_stages(3, 9);
        let k = KernelConfig::default();
        let img = image(16, 16, 1);
        let mask = Mask::all_true(16, 16);
        assert!(matches!(
            adapt(&img, &img, &mask, 1, 0.01, &ex, &k, 100.0),
            Err(Error::Reference(_))
        ));
    }

    #[test]
    fn adapt_corrects_brightness_shift() {
        // generated = reference + 0.15 on the masked half; 50 steps must cut
        // the masked-region brightness gap by at least half
        let ex = FeatureExtractor::<f64>::with_stages(4, 9);
        let k = KernelConfig::default();
        let reference = image(32, 32, 33);
        let mut mdata = vec![false; 32 * 32];
        for (i, d) in mdata.iter_mut().enumerate() {
            if (i % 32) >= 16 {
                *d = true;
            }
        }
        let mask = Mask::new(32, 32, mdata).unwrap();
        let generated = {
            let data = reference
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| if m { (v + 0.15).clamp(0.0, 1.0) } else { v })
                .collect();
            Raster::new(vec!["g".into()], 32, 32, data).unwrap()
        };
        let masked_mean = |r: &Raster<f64>| {
            let (mut acc, mut n) = (0.0, 0);
            for (i, &m) in mask.data().iter().enumerate() {
                if m {
                    acc += r.data()[i];
                    n += 1;
                }
            }
            acc / n as f64
        };
        let gap0 = (masked_mean(&generated) - masked_mean(&reference)).abs();
        let out = adapt(&generated, &reference, &mask, 50, 0.01, &ex, &k, 100.0).unwrap();
        let gap1 = (masked_mean(&out) - masked_mean(&reference)).abs();
        assert!(gap1 <= 0.5 * gap0, "gap {gap0} -> {gap1}");
    }
}
