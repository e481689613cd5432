//! Noise schedule, closed-form forward diffusion, DDIM sampling with
//! conditioning, and mask-guided inpainting by per-step known-region
//! replacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSchedule<S> {
    pub t_count: usize,
    pub beta: Vec<S>,
    pub alpha: Vec<S>,
    pub alpha_bar: Vec<S>,
}

/// Linear beta schedule inclusive of both endpoints.
pub fn make_schedule<S: Scalar>(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<S>> {
    if t_count < 1 {
        return Err(Error::config("T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config("need 0 < beta_start <= beta_end < 1"));
    }
    let mut beta = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let frac = if t_count == 1 { 0.0 } else { t as f64 / (t_count - 1) as f64 };
        beta.push(S::from_f64_(beta_start + (beta_end - beta_start) * frac));
    }
    let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut prod = S::one();
    for &a in &alpha {
        prod = prod * a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { t_count, beta, alpha, alpha_bar })
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Stable digest so checkpoints can assert schedule compatibility.
    pub fn hash(&self) -> String {
        let mut acc: u64 = 0xcbf29ce484222325;
        for &b in &self.beta {
            let bits = (b.to_f64_() as f32).to_bits() as u64;
            acc ^= bits;
            acc = acc.wrapping_mul(0x100000001b3);
        }
        format!("{:016x}-{}", acc, self.t_count)
    }
}

/// The standard training chain: T=1000, linear beta in [1e-4, 2e-2].
pub fn default_schedule<S: Scalar>() -> NoiseSchedule<S> {
    make_schedule(1000, 1e-4, 2e-2).expect("default schedule bounds are valid")
}

/// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
pub fn forward_diffuse<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    if eps.shape() != x0.shape() {
        return Err(Error::geometry("eps shape does not match x0"));
    }
    if t >= sched.t_count {
        return Err(Error::config(format!("t {t} out of range for T {}", sched.t_count)));
    }
    let ab = sched.alpha_bar[t];
    let (sa, sb) = (ab.sqrt(), (S::one() - ab).sqrt());
    Ok(x0.zip(eps, |x, e| sa * x + sb * e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub strength: f64,
    pub guidance_scale: f64,
    pub seed: u64,
    /// upstream preprocessing knob kept for provenance; unused here
    pub detection_resolution: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            eta: 1.0,
            strength: 0.9,
            guidance_scale: 1.0,
            seed: 0,
            detection_resolution: 384,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_count: usize) -> Result<()> {
        if self.steps == 0 || self.steps > t_count {
            return Err(Error::config(format!("steps {} outside 1..={t_count}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("eta must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::config("strength must be in [0,1]"));
        }
        Ok(())
    }
}

/// Anything that predicts the noise residual at a given timestep.
pub trait NoisePredictor<S: Scalar> {
    fn predict_eps(&self, x: &Tensor<S>, t: usize) -> Tensor<S>;
}

impl<S: Scalar, F: Fn(&Tensor<S>, usize) -> Tensor<S>> NoisePredictor<S> for F {
    fn predict_eps(&self, x: &Tensor<S>, t: usize) -> Tensor<S> {
        self(x, t)
    }
}

fn standard_normal<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_(StandardNormal.sample(rng))).collect();
    Tensor::new(shape, data)
}

/// Timesteps traversed for a chain of `span` noise levels, descending.
pub fn ddim_timesteps(span: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(span.max(1));
    let mut taus: Vec<usize> = (0..steps).map(|i| i * span / steps).collect();
    taus.dedup();
    taus.reverse();
    taus
}

struct DdimState<S> {
    x: Tensor<S>,
    taus: Vec<usize>,
}

fn ddim_init<S: Scalar>(
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    shape: &[usize],
    init: Option<(&Tensor<S>, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<DdimState<S>>> {
    cfg.validate(sched.t_count)?;
    match init {
        Some((img, strength)) => {
            if img.shape() != shape {
                return Err(Error::geometry("init shape mismatch"));
            }
            let span = (strength * sched.t_count as f64).round() as usize;
            if span == 0 {
                return Ok(None); // zero-length chain: init passes through
            }
            let eps = standard_normal(shape, rng);
            let x = forward_diffuse(img, span - 1, &eps, sched)?;
            Ok(Some(DdimState { x, taus: ddim_timesteps(span, cfg.steps) }))
        }
        None => {
            let x = standard_normal(shape, rng);
            Ok(Some(DdimState { x, taus: ddim_timesteps(sched.t_count, cfg.steps) }))
        }
    }
}

/// One DDIM update from noise level `tau` down to `tau_prev` (None = clean).
pub fn ddim_step<S: Scalar>(
    x: &Tensor<S>,
    eps_hat: &Tensor<S>,
    tau: usize,
    tau_prev: Option<usize>,
    eta: f64,
    sched: &NoiseSchedule<S>,
    z: Option<&Tensor<S>>,
) -> Tensor<S> {
    let ab_t = sched.alpha_bar[tau];
    let ab_p = tau_prev.map_or(S::one(), |tp| sched.alpha_bar[tp]);
    let one = S::one();
    let sigma = if eta == 0.0 || tau_prev.is_none() {
        S::zero()
    } else {
        S::from_f64_(eta)
            * ((one - ab_p) / (one - ab_t)).sqrt()
            * (one - ab_t / ab_p).sqrt()
    };
    let dir_coef = (one - ab_p - sigma * sigma).max(S::zero()).sqrt();
    let (sa_t, sb_t) = (ab_t.sqrt(), (one - ab_t).sqrt());
    let sa_p = ab_p.sqrt();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let x0_hat = (x.data()[i] - sb_t * eps_hat.data()[i]) / sa_t;
        let mut v = sa_p * x0_hat + dir_coef * eps_hat.data()[i];
        if let Some(noise) = z {
            v += sigma * noise.data()[i];
        }
        out.data_mut()[i] = v;
    }
    out
}

fn run_chain<S: Scalar>(
    predictor: &impl NoisePredictor<S>,
    state: DdimState<S>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule<S>,
    rng: &mut ChaCha8Rng,
    mut per_step: impl FnMut(Tensor<S>, Option<usize>) -> Tensor<S>,
) -> Tensor<S> {
    let mut x = state.x;
    for (i, &tau) in state.taus.iter().enumerate() {
        let tau_prev = state.taus.get(i + 1).copied();
        let eps_hat = predictor.predict_eps(&x, tau);
        let z = if cfg.eta > 0.0 && tau_prev.is_some() {
            Some(standard_normal(x.shape(), rng))
        } else {
            None
        };
        x = ddim_step(&x, &eps_hat, tau, tau_prev, cfg.eta, sched, z.as_ref());
        x = per_step(x, tau_prev);
    }
    x
}

fn clip01<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|v| v.max(S::zero()).min(S::one()))
}

/// DDIM sampling over `steps` timesteps; with `init`, starts from
/// forward-diffused init at round(strength * T). Deterministic in seed.
pub fn ddim_sample<S: Scalar>(
    predictor: &impl NoisePredictor<S>,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    sched: &NoiseSchedule<S>,
    init: Option<(&Raster<S>, f64)>,
) -> Result<Raster<S>> {
    let tshape = [1usize, shape.0, shape.1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_t = init.map(|(r, s)| (Tensor::new(&tshape, r.band_plane(0).to_vec()), s));
    let state = ddim_init(sched, cfg, &tshape, init_t.as_ref().map(|(t, s)| (t, *s)), &mut rng)?;
    let x = match state {
        None => init_t.expect("zero-length chain only with init").0,
        Some(st) => run_chain(predictor, st, cfg, sched, &mut rng, |x, _| x),
    };
    Raster::new(vec!["gen".to_string()], shape.0, shape.1, clip01(&x).into_data())
}

/// Mask-guided inpainting: after every step the known (unmasked) region is
/// replaced by the forward-diffused observed image at the current noise
/// level, and copied verbatim at the end.
pub fn inpaint<S: Scalar>(
    predictor: &impl NoisePredictor<S>,
    observed: &Raster<S>,
    mask: &Mask,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule<S>,
) -> Result<Raster<S>> {
    if mask.height != observed.height || mask.width != observed.width {
        return Err(Error::geometry("mask shape does not match observed"));
    }
    let tshape = [1usize, observed.height, observed.width];
    let obs = Tensor::new(&tshape, observed.band_plane(0).to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = ddim_init(sched, cfg, &tshape, Some((&obs, cfg.strength)), &mut rng)?;
    let x = match state {
        None => obs.clone(),
        Some(st) => {
            let mask_data = mask.data().to_vec();
            run_chain(predictor, st, cfg, sched, &mut rng, |mut x, tau_prev| {
                let known = match tau_prev {
                    Some(tp) => {
                        let eps = standard_normal(&tshape, &mut ChaCha8Rng::seed_from_u64(
                            cfg.seed ^ (tp as u64).wrapping_mul(0x9e3779b97f4a7c15),
                        ));
                        forward_diffuse(&obs, tp, &eps, sched).expect("shapes checked")
                    }
                    None => obs.clone(),
                };
                for (i, (&m, &k)) in mask_data.iter().zip(known.data()).enumerate() {
                    if !m {
                        x.data_mut()[i] = k;
                    }
                }
                x
            })
        }
    };
    let mut data = clip01(&x).into_data();
    // known pixels are exact, clipping never touches them
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            data[i] = observed.band_plane(0)[i];
        }
    }
    Raster::new(vec![observed.bands[0].clone()], observed.height, observed.width, data)
}
