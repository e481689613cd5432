//! Training loop over (image, DEM, prompt) triples. Two-phase schedule:
//! phase A is the standard noise-prediction objective (a fast surrogate for
//! the reconstruction term), phase B generates an image through a short
//! deterministic DDIM chain on the tape and descends the full composite of
//! reconstruction, distribution, and style losses.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, ConditionInput, DenoiserParams, ForwardVars, PromptSpec};
use crate::diffusion::{ddim_timesteps, forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::perceptual::{perceptual_terms_var, style_targets, FeatureExtractor, KernelConfig};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_style: f64,
    /// optimizer steps spent in phase A before phase B begins
    pub phase_a_steps: usize,
    /// DDIM chain length used to generate images in phase B
    pub ddim_steps_train: usize,
    /// image-to-image strength of the phase-B chain
    pub strength: f64,
    pub seed: u64,
    pub kernel: KernelConfig,
    /// checkpoint cadence in epochs; 0 disables intermediate checkpoints
    pub checkpoint_every: usize,
    /// learning-rate multiplier for the conditioning branch. The zero-projected
    /// branch receives gradients orders of magnitude smaller than the trunk, so
    /// it needs a larger step to train on the same schedule.
    pub cond_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 1,
            batch: 4,
            lambda_style: 100.0,
            phase_a_steps: usize::MAX,
            ddim_steps_train: 10,
            strength: 0.9,
            seed: 0,
            kernel: KernelConfig::default(),
            checkpoint_every: 0,
            cond_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if self.epochs < 1 || self.batch < 1 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if self.ddim_steps_train < 1 {
            return Err(Error::config("ddim_steps_train must be >= 1"));
        }
        if !(0.0 < self.strength && self.strength <= 1.0) {
            return Err(Error::config("strength must be in (0,1]"));
        }
        if self.cond_lr_scale <= 0.0 || !self.cond_lr_scale.is_finite() {
            return Err(Error::config("cond_lr_scale must be finite and > 0"));
        }
        Ok(())
    }
}

/// One training triple.
#[derive(Clone, Debug)]
pub struct TrainItem<S> {
    pub image: Raster<S>,
    pub dem: Option<Raster<S>>,
    pub prompt: PromptSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub recon: f64,
    pub dis: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub const LOG_CSV_HEADER: &str = "step,epoch,recon,dis,style,total";

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            self.step, self.epoch, self.loss.recon, self.loss.dis, self.loss.style, self.loss.total
        )
    }
}

/// Mean over the batch of per-pixel-normalized squared L2 distance.
pub fn recon_loss<S: Scalar>(truth: &[Tensor<S>], gen: &[Tensor<S>]) -> Result<S> {
    if truth.len() != gen.len() || truth.is_empty() {
        return Err(Error::geometry("batch lengths differ or are empty"));
    }
    let mut acc = S::zero();
    for (x, y) in truth.iter().zip(gen) {
        if x.shape() != y.shape() {
            return Err(Error::geometry("recon_loss shape mismatch"));
        }
        let sq: S = x.data().iter().zip(y.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        acc += sq / S::from_usize_(x.len());
    }
    Ok(acc / S::from_usize_(truth.len()))
}

/// Mutable training state; resumable because every random draw is derived
/// from (config seed, epoch, step) rather than accumulated RNG state.
pub struct TrainState<S: Scalar> {
    pub params: DenoiserParams<S>,
    pub adapters: Option<AdapterSet<S>>,
    pub epoch: usize,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for v in [a, b] {
        h ^= v.wrapping_mul(0xff51afd7ed558ccd);
        h = h.rotate_left(31).wrapping_mul(0xc4ceb9fe1a85ec53);
    }
    h
}

fn normal_tensor<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::from_f64_(StandardNormal.sample(&mut rng))).collect())
}

fn item_tensors<S: Scalar>(item: &TrainItem<S>) -> Result<(Tensor<S>, Option<ConditionInput<S>>)> {
    if item.image.n_bands() != 1 {
        return Err(Error::geometry("training images must be single-band"));
    }
    let x = Tensor::new(&[1, item.image.height, item.image.width], item.image.data().to_vec());
    let cond = item.dem.as_ref().map(|d| ConditionInput::new(d.clone())).transpose()?;
    Ok((x, cond))
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::Divergence { component: name.to_string() });
    }
    Ok(v)
}

/// Build the phase-appropriate loss on the tape. Returns the scalar total
/// and its decomposition.
fn loss_on_tape<'t, S: Scalar>(
    tape: &'t Tape<S>,
    vars: &ForwardVars<'t, S>,
    params: &DenoiserParams<S>,
    batch: &[TrainItem<S>],
    cfg: &TrainConfig,
    sched: &NoiseSchedule<S>,
    ex: &FeatureExtractor<S>,
    phase: Phase,
    step: usize,
) -> Result<(Var<'t, S>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::config("batch must be non-empty"));
    }
    let inv_n = S::one() / S::from_usize_(batch.len());
    match phase {
        Phase::A => {
            let mut total: Option<Var<'t, S>> = None;
            for (i, item) in batch.iter().enumerate() {
                let (x0, cond) = item_tensors(item)?;
                let ids = params.resolve_prompt(&item.prompt)?;
                let seed = mix(cfg.seed, step as u64, i as u64);
                let t = ChaCha8Rng::seed_from_u64(seed).gen_range(0..sched.t_count);
                let eps = normal_tensor(x0.shape(), mix(seed, 1, t as u64));
                let x_t = tape.var(forward_diffuse(&x0, t, &eps, sched)?);
                let cvar = cond.as_ref().map(|c| tape.var(c.normalized()));
                let eps_hat = forward(tape, &params.arch, vars, x_t, t, cvar, &ids);
                let li = eps_hat.sub(tape.var(eps)).square().mean();
                total = Some(match total {
                    Some(acc) => acc.add(li),
                    None => li,
                });
            }
            let total = total.unwrap().scale(inv_n);
            let recon = check_finite("recon", total.value().item().to_f64_())?;
            Ok((total, LossBreakdown { recon, dis: 0.0, style: 0.0, total: recon }))
        }
        Phase::B => {
            let span = ((cfg.strength * sched.t_count as f64).round() as usize).max(1);
            let taus = ddim_timesteps(span, cfg.ddim_steps_train);
            let mut recon_v: Option<Var<'t, S>> = None;
            let mut dis_v: Option<Var<'t, S>> = None;
            let mut style_v: Option<Var<'t, S>> = None;
            for (i, item) in batch.iter().enumerate() {
                let (x0, cond) = item_tensors(item)?;
                let ids = params.resolve_prompt(&item.prompt)?;
                let seed = mix(cfg.seed, step as u64, i as u64);
                let eps = normal_tensor(x0.shape(), mix(seed, 2, 0));
                let mut x = tape.var(forward_diffuse(&x0, span - 1, &eps, sched)?);
                let cvar = cond.as_ref().map(|c| tape.var(c.normalized()));
                // deterministic short chain, differentiable end to end
                for (j, &tau) in taus.iter().enumerate() {
                    let ab_t = sched.alpha_bar[tau].to_f64_();
                    let ab_p = taus.get(j + 1).map_or(1.0, |&tp| sched.alpha_bar[tp].to_f64_());
                    let dir = (1.0 - ab_p).max(0.0).sqrt();
                    let a_coef = (ab_p / ab_t).sqrt();
                    let e_coef = dir - a_coef * (1.0 - ab_t).sqrt();
                    let eps_hat = forward(tape, &params.arch, vars, x, tau, cvar, &ids);
                    x = x.scale(S::from_f64_(a_coef)).add(eps_hat.scale(S::from_f64_(e_coef)));
                }
                let truth = tape.var(x0.clone());
                let ri = x.sub(truth).square().mean();
                let targets = style_targets(ex, &item.image, &cfg.kernel)?;
                let (di, si) = perceptual_terms_var(tape, ex, &ex.vars(tape), x, &targets)?;
                recon_v = Some(recon_v.map_or(ri, |acc| acc.add(ri)));
                dis_v = Some(dis_v.map_or(di, |acc| acc.add(di)));
                style_v = Some(style_v.map_or(si, |acc| acc.add(si)));
            }
            let recon_v = recon_v.unwrap().scale(inv_n);
            let dis_v = dis_v.unwrap().scale(inv_n);
            let style_v = style_v.unwrap().scale(inv_n);
            let recon = check_finite("recon", recon_v.value().item().to_f64_())?;
            let dis = check_finite("dis", dis_v.value().item().to_f64_())?;
            let style = check_finite("style", style_v.value().item().to_f64_())?;
            let total_v = recon_v.add(dis_v).add(style_v.scale(S::from_f64_(cfg.lambda_style)));
            let total = check_finite("total", total_v.value().item().to_f64_())?;
            Ok((total_v, LossBreakdown { recon, dis, style, total }))
        }
    }
}

/// Loss value without any parameter update, for curves and oracles.
pub fn evaluate_loss<S: Scalar>(
    params: &DenoiserParams<S>,
    adapters: Option<&AdapterSet<S>>,
    batch: &[TrainItem<S>],
    cfg: &TrainConfig,
    sched: &NoiseSchedule<S>,
    ex: &FeatureExtractor<S>,
    phase: Phase,
    step: usize,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let mut vars = ForwardVars::from_params(&tape, params);
    if let Some(ad) = adapters {
        vars = vars.with_adapters(&tape, ad);
    }
    let (_, breakdown) = loss_on_tape(&tape, &vars, params, batch, cfg, sched, ex, phase, step)?;
    Ok(breakdown)
}

fn sgd_update<S: Scalar>(w: &mut Tensor<S>, g: &Tensor<S>, lr: f64) {
    let lr = S::from_f64_(lr);
    for (p, &gv) in w.data_mut().iter_mut().zip(g.data()) {
        *p -= lr * gv;
    }
}

/// One SGD step. With adapters attached, only the low-rank factors move and
/// the base weights stay frozen; otherwise every parameter is trainable.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch: &[TrainItem<S>],
    cfg: &TrainConfig,
    sched: &NoiseSchedule<S>,
    ex: &FeatureExtractor<S>,
    step: usize,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let phase = if step < cfg.phase_a_steps { Phase::A } else { Phase::B };
    let tape = Tape::new();
    let mut vars = ForwardVars::from_params(&tape, &state.params);
    if let Some(ad) = &state.adapters {
        vars = vars.with_adapters(&tape, ad);
    }
    let (total, breakdown) = loss_on_tape(&tape, &vars, &state.params, batch, cfg, sched, ex, phase, step)?;
    let grads = tape.backward(total);
    match &mut state.adapters {
        Some(adapters) => {
            for (name, ad) in adapters.iter_mut() {
                let (av, bv, _) = vars.lora[name];
                if let Some(g) = grads.get(av) {
                    sgd_update(&mut ad.a, g, cfg.lr);
                }
                if let Some(g) = grads.get(bv) {
                    sgd_update(&mut ad.b, g, cfg.lr);
                }
            }
        }
        None => {
            for (name, var) in &vars.params {
                if let Some(g) = grads.get(*var) {
                    let lr = if name.starts_with("cond.") {
                        cfg.lr * cfg.cond_lr_scale
                    } else {
                        cfg.lr
                    };
                    sgd_update(state.params.tensors.get_mut(name).unwrap(), g, lr);
                }
            }
        }
    }
    Ok(breakdown)
}

/// Epochs of seeded-shuffled batches from `state.epoch` to `cfg.epochs`,
/// returning the per-step loss log. Interrupting after epoch k and resuming
/// from a checkpointed state reproduces the uninterrupted run exactly.
pub fn run_training<S: Scalar>(
    state: &mut TrainState<S>,
    dataset: &[TrainItem<S>],
    cfg: &TrainConfig,
    sched: &NoiseSchedule<S>,
    ex: &FeatureExtractor<S>,
    out_dir: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    for (i, item) in dataset.iter().enumerate() {
        state.params.resolve_prompt(&item.prompt).map_err(|e| {
            Error::config(format!("dataset entry {i} unusable: {e}"))
        })?;
    }
    let n_batches = dataset.len().div_ceil(cfg.batch);
    let mut log = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, epoch as u64)));
        for (bidx, chunk) in order.chunks(cfg.batch).enumerate() {
            let step = epoch * n_batches + bidx;
            let batch: Vec<TrainItem<S>> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let loss = train_step(state, &batch, cfg, sched, ex, step)?;
            log.push(LogRow { step, epoch, loss });
        }
        state.epoch = epoch + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_state(state, &dir.join(format!("epoch{:04}", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_state(state, &dir.join("final"))?;
        let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
        writeln!(f, "{LOG_CSV_HEADER}")?;
        for row in &log {
            writeln!(f, "{}", row.csv_row())?;
        }
    }
    Ok(log)
}

/// Writes `<prefix>.ckpt` (and `<prefix>.lora.ckpt` when adapters exist).
pub fn save_state<S: Scalar>(state: &TrainState<S>, prefix: &Path) -> Result<()> {
    if let Some(parent) = prefix.parent() {
        std::fs::create_dir_all(parent)?;
    }
    state.params.save(prefix.with_extension("ckpt"))?;
    if let Some(adapters) = &state.adapters {
        save_adapters(adapters, prefix.with_extension("lora.ckpt"))?;
    }
    Ok(())
}

pub fn save_adapters<S: Scalar>(adapters: &AdapterSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut meta = Vec::new();
    for (name, ad) in adapters {
        tensors.insert(format!("{name}/a"), ad.a.clone());
        tensors.insert(format!("{name}/b"), ad.b.clone());
        meta.push(serde_json::json!({
            "target": name,
            "rank": ad.rank,
            "scale": ad.scale.to_f64_(),
        }));
    }
    crate::checkpoint::save(path, "lora", serde_json::json!({ "adapters": meta }), &tensors)
}

pub fn load_adapters<S: Scalar>(path: impl AsRef<Path>) -> Result<AdapterSet<S>> {
    let (meta, tensors) = crate::checkpoint::load::<S>(path, "lora")?;
    let entries = meta["adapters"]
        .as_array()
        .ok_or_else(|| Error::format("adapters", "missing"))?;
    let mut set = AdapterSet::new();
    for e in entries {
        let target = e["target"].as_str().ok_or_else(|| Error::format("target", "missing"))?;
        let rank = e["rank"].as_u64().unwrap_or(0) as usize;
        let scale = S::from_f64_(e["scale"].as_f64().unwrap_or(1.0));
        let a = tensors.get(&format!("{target}/a")).ok_or_else(|| Error::Key(format!("{target}/a")))?;
        let b = tensors.get(&format!("{target}/b")).ok_or_else(|| Error::Key(format!("{target}/b")))?;
        set.insert(
            target.to_string(),
            crate::lora::LoraAdapter { target: target.to_string(), a: a.clone(), b: b.clone(), rank, scale },
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserArch};
    use crate::diffusion::make_schedule;
    use crate::lora::attach_lora;

    fn vocab() -> Vec<String> {
        vec!["site:a".into(), "band:red".into()]
    }

    fn item(seed: u64) -> TrainItem<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let dem: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        TrainItem {
            image: Raster::new(vec!["red".into()], 8, 8, img).unwrap(),
            dem: Some(Raster::new(vec!["dem".into()], 8, 8, dem).unwrap()),
            prompt: PromptSpec::task1("a", "red"),
        }
    }

    fn setup() -> (TrainState<f64>, NoiseSchedule<f64>, FeatureExtractor<f64>, TrainConfig) {
        let params = init_denoiser(&DenoiserArch::tiny(), &vocab(), 7).unwrap();
        let sched = make_schedule(20, 1e-3, 2e-2).unwrap();
        let ex = FeatureExtractor::with_stages(3, 5);
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 1,
            batch: 2,
            phase_a_steps: 0, // straight to phase B unless a test overrides
            ddim_steps_train: 3,
            seed: 11,
            ..Default::default()
        };
        (TrainState { params, adapters: None, epoch: 0 }, sched, ex, cfg)
    }

    #[test]
    fn recon_loss_oracles() {
        let a = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(recon_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let x = Tensor::<f64>::scalar(0.0);
        let y = Tensor::scalar(0.5);
        assert_eq!(recon_loss(&[x.clone()], &[y.clone()]).unwrap(), 0.25);
        // duplicating pairs leaves the batch mean unchanged
        let single = recon_loss(&[x.clone(), a.clone()], &[y.clone(), a.clone()]).unwrap();
        let doubled =
            recon_loss(&[x.clone(), a.clone(), x, a.clone()], &[y.clone(), a.clone(), y, a]).unwrap();
        assert!((single - doubled).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut state, sched, ex, mut cfg) = setup();
        cfg.lr = 0.0;
        cfg.validate().unwrap();
        let before = state.params.tensors.clone();
        train_step(&mut state, &[item(1)], &cfg, &sched, &ex, 0).unwrap();
        for (k, t) in &state.params.tensors {
            assert_eq!(t.data(), before[k].data(), "{k} moved");
        }
        assert!(TrainConfig { lr: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn cond_lr_scale_scales_only_cond_updates() {
        let (state0, sched, ex, mut cfg) = setup();
        // nudge the zero projections off zero so the branch receives gradient
        let mut warm = state0.params.clone();
        for (name, t) in warm.tensors.iter_mut() {
            if name.contains("zero") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * (i as f64 + 1.0);
                }
            }
        }
        let run = |scale: f64| {
            let mut s = TrainState { params: warm.clone(), adapters: None, epoch: 0 };
            let mut c = cfg.clone();
            c.cond_lr_scale = scale;
            train_step(&mut s, &[item(1)], &c, &sched, &ex, 0).unwrap();
            s.params
        };
        let p1 = run(1.0);
        let p3 = run(3.0);
        for (name, base) in warm.tensors.iter() {
            let d1: Vec<f64> =
                p1.tensors[name].data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
            let d3: Vec<f64> =
                p3.tensors[name].data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
            let factor = if name.starts_with("cond.") { 3.0 } else { 1.0 };
            for (a, b) in d1.iter().zip(&d3) {
                assert!((b - factor * a).abs() <= 1e-9 + 1e-6 * a.abs(), "{name}: {a} vs {b}");
            }
        }
        cfg.cond_lr_scale = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let (state0, sched, ex, cfg) = setup();
        let run = || {
            let mut s = TrainState {
                params: state0.params.clone(),
                adapters: None,
                epoch: 0,
            };
            let l = train_step(&mut s, &[item(1), item(2)], &cfg, &sched, &ex, 0).unwrap();
            (s.params.tensors, l.total)
        };
        let (t1, l1) = run();
        let (t2, l2) = run();
        assert_eq!(l1, l2);
        for (k, t) in &t1 {
            assert_eq!(t.data(), t2[k].data());
        }
    }

    #[test]
    fn decomposition_identity() {
        let (state, sched, ex, cfg) = setup();
        let l = evaluate_loss(&state.params, None, &[item(3)], &cfg, &sched, &ex, Phase::B, 0).unwrap();
        assert!((l.total - (l.recon + l.dis + cfg.lambda_style * l.style)).abs() < 1e-9);
        assert!(l.recon >= 0.0 && l.dis >= 0.0 && l.style >= 0.0);
    }

    #[test]
    fn phase_b_gradient_matches_finite_differences() {
        // 1-sample batch, 8x8 tile, 3-step chain: recover the analytic
        // gradient from the SGD update and compare against central FD
        let (state0, sched, ex, cfg) = setup();
        let batch = [item(4)];
        let probes = ["enc0.conv1.w", "dec0.emb.w", "out.w", "prompt.table"];
        for name in probes {
            let mut s = TrainState { params: state0.params.clone(), adapters: None, epoch: 0 };
            train_step(&mut s, &batch, &cfg, &sched, &ex, 0).unwrap();
            let idx = state0.params.tensors[name].len() / 2;
            let analytic =
                (state0.params.tensors[name].data()[idx] - s.params.tensors[name].data()[idx]) / cfg.lr;
            let eps = 1e-5;
            let eval = |delta: f64| {
                let mut p = state0.params.clone();
                p.tensors.get_mut(name).unwrap().data_mut()[idx] += delta;
                evaluate_loss(&p, None, &batch, &cfg, &sched, &ex, Phase::B, 0).unwrap().total
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-3,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn lora_training_freezes_base() {
        let (state0, sched, ex, mut cfg) = setup();
        cfg.lr = 1e-2;
        let targets = state0.params.lora_default_targets();
        let adapters = attach_lora(&state0.params, 2, &targets, 9).unwrap();
        let mut s = TrainState {
            params: state0.params.clone(),
            adapters: Some(adapters),
            epoch: 0,
        };
        train_step(&mut s, &[item(5)], &cfg, &sched, &ex, 0).unwrap();
        for (k, t) in &s.params.tensors {
            assert_eq!(t.data(), state0.params.tensors[k].data(), "base weight {k} moved");
        }
        let moved = s
            .adapters
            .as_ref()
            .unwrap()
            .values()
            .any(|ad| ad.b.data().iter().any(|&v| v != 0.0));
        assert!(moved, "no adapter factor moved");
    }

    #[test]
    fn phase_a_loss_decreases() {
        let (mut state, sched, ex, mut cfg) = setup();
        cfg.phase_a_steps = usize::MAX;
        cfg.lr = 2e-1;
        let data: Vec<TrainItem<f64>> = (0..4).map(item).collect();
        let before =
            evaluate_loss(&state.params, None, &data, &cfg, &sched, &ex, Phase::A, 1_000_000).unwrap();
        for step in 0..200 {
            let l = train_step(&mut state, &data, &cfg, &sched, &ex, step).unwrap();
            if step % 20 == 0 {
                println!("step {step}: {}", l.total);
            }
        }
        let after =
            evaluate_loss(&state.params, None, &data, &cfg, &sched, &ex, Phase::A, 1_000_000).unwrap();
        assert!(
            after.total < 0.7 * before.total,
            "phase-A loss {} -> {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn run_training_resumable() {
        let (state0, sched, ex, mut cfg) = setup();
        cfg.epochs = 2;
        cfg.phase_a_steps = usize::MAX; // phase A keeps this test fast
        let data: Vec<TrainItem<f64>> = (0..3).map(item).collect();
        let mut full = TrainState { params: state0.params.clone(), adapters: None, epoch: 0 };
        let full_log = run_training(&mut full, &data, &cfg, &sched, &ex, None).unwrap();

        let mut resumed = TrainState { params: state0.params.clone(), adapters: None, epoch: 0 };
        let mut cfg1 = cfg.clone();
        cfg1.epochs = 1;
        let mut log_a = run_training(&mut resumed, &data, &cfg1, &sched, &ex, None).unwrap();
        assert_eq!(resumed.epoch, 1);
        let log_b = run_training(&mut resumed, &data, &cfg, &sched, &ex, None).unwrap();
        log_a.extend(log_b);

        assert_eq!(full_log.len(), log_a.len());
        for (x, y) in full_log.iter().zip(&log_a) {
            assert_eq!(x.csv_row(), y.csv_row());
        }
        for (k, t) in &full.params.tensors {
            assert_eq!(t.data(), resumed.params.tensors[k].data());
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let (mut state, sched, ex, cfg) = setup();
        assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..cfg.clone() }.validate().is_err());
        assert!(run_training(&mut state, &[], &cfg, &sched, &ex, None).is_err());
        // unknown prompt token listed before any training happens
        let mut bad = item(1);
        bad.prompt = PromptSpec::task1("unknown", "red");
        let err = run_training(&mut state, &[bad], &cfg, &sched, &ex, None).unwrap_err();
        assert!(err.to_string().contains("entry 0"));
    }

    #[test]
    fn adapter_checkpoint_roundtrip() {
        let (state, _, _, _) = setup();
        let targets = state.params.lora_default_targets();
        let adapters = attach_lora(&state.params, 2, &targets, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.lora.ckpt");
        save_adapters(&adapters, &path).unwrap();
        let back = load_adapters::<f64>(&path).unwrap();
        assert_eq!(back.len(), adapters.len());
        for (k, ad) in &adapters {
            assert_eq!(back[k].rank, ad.rank);
            for (a, b) in ad.a.data().iter().zip(back[k].a.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }
}
