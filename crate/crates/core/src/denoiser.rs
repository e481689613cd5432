//! The trainable noise predictor: a small multi-scale convolutional
//! encoder-decoder with sinusoidal timestep embedding, DEM condition
//! injection through zero-initialized 1x1 projections, and summed token
//! prompt embeddings. Generates one band at a time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    /// channel width per resolution level
    pub widths: Vec<usize>,
    /// embedding dimension for timestep and prompt
    pub emb_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch { widths: vec![32, 64, 128], emb_dim: 32 }
    }
}

impl DenoiserArch {
    /// Small arch for tests and fast CPU experiments.
    pub fn tiny() -> Self {
        DenoiserArch { widths: vec![8, 16], emb_dim: 16 }
    }

    pub fn small() -> Self {
        DenoiserArch { widths: vec![8, 16, 32], emb_dim: 16 }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Closed-form trainable parameter count for this arch and vocab size.
    pub fn param_count(&self, vocab_len: usize) -> usize {
        let l = self.levels();
        let mut n = 0;
        for i in 0..l {
            let cin = if i == 0 { 1 } else { self.widths[i - 1] };
            let w = self.widths[i];
            n += w * cin * 9 + w; // enc conv1
            n += w * w * 9 + w; // enc conv2
            n += w * self.emb_dim; // embedding projection
            n += w * cin * 9 + w; // cond branch conv
            n += w * w + w; // zero 1x1 projection
        }
        for i in 0..l - 1 {
            let w = self.widths[i];
            n += w * (self.widths[i + 1] + w) * 9 + w; // dec conv1
            n += w * w * 9 + w; // dec conv2
            n += w * self.emb_dim; // embedding projection
        }
        n += self.widths[0] * 9 + 1; // output conv
        n += vocab_len * self.emb_dim; // prompt table
        n += 2 * self.emb_dim; // task embeddings
        n
    }
}

/// Fixed-format token prompt: task 1 is (site, band), task 2 is
/// (location, date, day, band).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: u8,
    pub site_or_location: String,
    pub date: Option<String>,
    pub day: Option<usize>,
    pub band: String,
}

impl PromptSpec {
    pub fn task1(site: &str, band: &str) -> Self {
        PromptSpec { task: 1, site_or_location: site.into(), date: None, day: None, band: band.into() }
    }

    pub fn task2(location: &str, date: &str, day: usize, band: &str) -> Self {
        PromptSpec {
            task: 2,
            site_or_location: location.into(),
            date: Some(date.into()),
            day: Some(day),
            band: band.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            1 => {
                if self.date.is_some() || self.day.is_some() {
                    return Err(Error::config("task-1 prompts carry no date or day token"));
                }
            }
            2 => {
                if self.date.is_none() || self.day.is_none() {
                    return Err(Error::config("task-2 prompts require date and day tokens"));
                }
            }
            t => return Err(Error::config(format!("task must be 1 or 2, got {t}"))),
        }
        Ok(())
    }

    pub fn tokens(&self) -> Result<Vec<String>> {
        self.validate()?;
        let mut toks = match self.task {
            1 => vec![format!("site:{}", self.site_or_location)],
            _ => vec![
                format!("loc:{}", self.site_or_location),
                format!("date:{}", self.date.as_ref().unwrap()),
                format!("day:{}", self.day.unwrap()),
            ],
        };
        toks.push(format!("band:{}", self.band));
        Ok(toks)
    }
}

/// DEM tile plus the affine normalization mapping it to zero mean and unit
/// variance before injection.
#[derive(Clone, Debug)]
pub struct ConditionInput<S> {
    pub dem: Raster<S>,
    pub mean: S,
    pub std: S,
}

impl<S: Scalar> ConditionInput<S> {
    pub fn new(dem: Raster<S>) -> Result<Self> {
        if dem.n_bands() != 1 {
            return Err(Error::geometry("condition input must be single-band"));
        }
        let n = S::from_usize_(dem.data().len());
        let mean = dem.data().iter().copied().sum::<S>() / n;
        let var = dem.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let std = var.sqrt().max(S::from_f64_(1e-6));
        Ok(ConditionInput { dem, mean, std })
    }

    pub fn normalized(&self) -> Tensor<S> {
        let (m, s) = (self.mean, self.std);
        let data = self.dem.data().iter().map(|&v| (v - m) / s).collect();
        Tensor::new(&[1, self.dem.height, self.dem.width], data)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserParams<S> {
    pub arch: DenoiserArch,
    pub vocab: Vec<String>,
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub seed: u64,
    pub schedule_hash: String,
}

fn conv_init<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(shape, (0..shape.iter().product()).map(|_| S::from_f64_(normal.sample(rng))).collect())
}

/// Base weights seeded-random with variance scaling; condition-branch output
/// projections exactly zero so conditioning is a no-op before training.
pub fn init_denoiser<S: Scalar>(arch: &DenoiserArch, vocab: &[String], seed: u64) -> Result<DenoiserParams<S>> {
    if vocab.is_empty() {
        return Err(Error::config("vocab must not be empty"));
    }
    if arch.levels() < 2 {
        return Err(Error::config("denoiser needs at least 2 levels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = BTreeMap::new();
    let l = arch.levels();
    for i in 0..l {
        let cin = if i == 0 { 1 } else { arch.widths[i - 1] };
        let w = arch.widths[i];
        t.insert(format!("enc{i}.conv1.w"), conv_init(&[w, cin, 3, 3], &mut rng));
        t.insert(format!("enc{i}.conv1.b"), Tensor::zeros(&[w]));
        t.insert(format!("enc{i}.conv2.w"), conv_init(&[w, w, 3, 3], &mut rng));
        t.insert(format!("enc{i}.conv2.b"), Tensor::zeros(&[w]));
        t.insert(format!("enc{i}.emb.w"), conv_init(&[w, arch.emb_dim], &mut rng));
        t.insert(format!("cond.enc{i}.conv.w"), conv_init(&[w, cin, 3, 3], &mut rng));
        t.insert(format!("cond.enc{i}.conv.b"), Tensor::zeros(&[w]));
        t.insert(format!("cond.zero{i}.w"), Tensor::zeros(&[w, w, 1, 1]));
        t.insert(format!("cond.zero{i}.b"), Tensor::zeros(&[w]));
    }
    for i in 0..l - 1 {
        let w = arch.widths[i];
        t.insert(format!("dec{i}.conv1.w"), conv_init(&[w, arch.widths[i + 1] + w, 3, 3], &mut rng));
        t.insert(format!("dec{i}.conv1.b"), Tensor::zeros(&[w]));
        t.insert(format!("dec{i}.conv2.w"), conv_init(&[w, w, 3, 3], &mut rng));
        t.insert(format!("dec{i}.conv2.b"), Tensor::zeros(&[w]));
        t.insert(format!("dec{i}.emb.w"), conv_init(&[w, arch.emb_dim], &mut rng));
    }
    // small-variance output head so gradients flow from the first step
    let mut out_rng = rng.clone();
    let normal = Normal::new(0.0, 1e-2).unwrap();
    t.insert(
        "out.w".to_string(),
        Tensor::new(&[1, arch.widths[0], 3, 3], (0..arch.widths[0] * 9).map(|_| S::from_f64_(normal.sample(&mut out_rng))).collect()),
    );
    t.insert("out.b".to_string(), Tensor::zeros(&[1]));
    let emb_normal = Normal::new(0.0, 0.05).unwrap();
    let mut emb_rng = out_rng;
    t.insert(
        "prompt.table".to_string(),
        Tensor::new(
            &[vocab.len(), arch.emb_dim],
            (0..vocab.len() * arch.emb_dim).map(|_| S::from_f64_(emb_normal.sample(&mut emb_rng))).collect(),
        ),
    );
    t.insert(
        "prompt.task".to_string(),
        Tensor::new(
            &[2, arch.emb_dim],
            (0..2 * arch.emb_dim).map(|_| S::from_f64_(emb_normal.sample(&mut emb_rng))).collect(),
        ),
    );
    Ok(DenoiserParams {
        arch: arch.clone(),
        vocab: vocab.to_vec(),
        tensors: t,
        seed,
        schedule_hash: String::new(),
    })
}

/// Prompt resolved against the vocab.
#[derive(Clone, Debug)]
pub struct PromptIds {
    pub tokens: Vec<usize>,
    pub task: usize,
}

impl<S: Scalar> DenoiserParams<S> {
    pub fn resolve_prompt(&self, prompt: &PromptSpec) -> Result<PromptIds> {
        let tokens = prompt
            .tokens()?
            .iter()
            .map(|tok| {
                self.vocab.iter().position(|v| v == tok).ok_or_else(|| Error::Key(tok.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptIds { tokens, task: (prompt.task - 1) as usize })
    }

    /// Largest 2-D weights: the per-level embedding projections.
    pub fn lora_default_targets(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.ends_with(".emb.w"))
            .cloned()
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Names grouped for gradient checks and optimizer sweeps.
    pub fn group_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "vocab": self.vocab,
            "schedule_hash": self.schedule_hash,
            "seed": self.seed,
        });
        crate::checkpoint::save(path, "denoiser", meta, &self.tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, tensors) = crate::checkpoint::load::<S>(path, "denoiser")?;
        let arch: DenoiserArch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::format("arch", e.to_string()))?;
        let vocab: Vec<String> = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| Error::format("vocab", e.to_string()))?;
        Ok(DenoiserParams {
            arch,
            vocab,
            tensors,
            seed: meta["seed"].as_u64().unwrap_or(0),
            schedule_hash: meta["schedule_hash"].as_str().unwrap_or("").to_string(),
        })
    }
}

/// Sinusoidal timestep embedding (fixed, not trained).
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for k in 0..half {
        let freq = (-(10000.0f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp();
        let angle = t as f64 * freq;
        data[k] = S::from_f64_(angle.sin());
        data[half + k] = S::from_f64_(angle.cos());
    }
    Tensor::new(&[dim], data)
}

/// Sum of per-token learned embeddings plus a fixed task-id embedding.
pub fn encode_prompt<S: Scalar>(params: &DenoiserParams<S>, prompt: &PromptSpec) -> Result<Tensor<S>> {
    let ids = params.resolve_prompt(prompt)?;
    let table = &params.tensors["prompt.table"];
    let task = &params.tensors["prompt.task"];
    let e = params.arch.emb_dim;
    let mut out = vec![S::zero(); e];
    for &i in &ids.tokens {
        for (o, &v) in out.iter_mut().zip(&table.data()[i * e..(i + 1) * e]) {
            *o += v;
        }
    }
    for (o, &v) in out.iter_mut().zip(&task.data()[ids.task * e..(ids.task + 1) * e]) {
        *o += v;
    }
    Ok(Tensor::new(&[e], out))
}

/// Tape-bound parameters (and optional LoRA factors) for one forward pass.
pub struct ForwardVars<'t, S: Scalar> {
    pub params: BTreeMap<String, Var<'t, S>>,
    pub lora: BTreeMap<String, (Var<'t, S>, Var<'t, S>, S)>,
}

impl<'t, S: Scalar> ForwardVars<'t, S> {
    pub fn from_params(tape: &'t Tape<S>, params: &DenoiserParams<S>) -> Self {
        let map = params.tensors.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect();
        ForwardVars { params: map, lora: BTreeMap::new() }
    }

    pub fn with_adapters(mut self, tape: &'t Tape<S>, adapters: &AdapterSet<S>) -> Self {
        for (name, ad) in adapters {
            self.lora.insert(name.clone(), (tape.var(ad.a.clone()), tape.var(ad.b.clone()), ad.scale));
        }
        self
    }

    fn proj(&self, name: &str, e_col: Var<'t, S>) -> Var<'t, S> {
        let w = self.params[name];
        let mut y = w.matmul(e_col);
        if let Some((a, b, scale)) = self.lora.get(name) {
            y = y.add(a.matmul(b.matmul(e_col)).scale(*scale));
        }
        let rows = w.shape()[0];
        y.reshape(&[rows])
    }
}

/// Differentiable forward pass. `x` is [1,H,W]; returns eps_hat of the same
/// shape. H and W must be divisible by 2^(levels-1).
pub fn forward<'t, S: Scalar>(
    tape: &'t Tape<S>,
    arch: &DenoiserArch,
    vars: &ForwardVars<'t, S>,
    x: Var<'t, S>,
    t: usize,
    cond: Option<Var<'t, S>>,
    prompt: &PromptIds,
) -> Var<'t, S> {
    let l = arch.levels();
    // combined timestep + prompt embedding, as a column for projections
    let t_emb = tape.var(timestep_embedding(t, arch.emb_dim));
    let tok = vars.params["prompt.table"].row_sum(&prompt.tokens);
    let task = vars.params["prompt.task"].row_sum(&[prompt.task]);
    let emb = t_emb.add(tok).add(task).reshape(&[arch.emb_dim, 1]);

    let mut h = x;
    let mut c = cond;
    let mut skips = Vec::with_capacity(l);
    for i in 0..l {
        h = h.conv2d(vars.params[&format!("enc{i}.conv1.w")], vars.params[&format!("enc{i}.conv1.b")]).silu();
        h = h.add_channel_bias(vars.proj(&format!("enc{i}.emb.w"), emb));
        h = h.conv2d(vars.params[&format!("enc{i}.conv2.w")], vars.params[&format!("enc{i}.conv2.b")]).silu();
        if let Some(ci) = c {
            let ci = ci
                .conv2d(vars.params[&format!("cond.enc{i}.conv.w")], vars.params[&format!("cond.enc{i}.conv.b")])
                .silu();
            let inject = ci.conv2d(vars.params[&format!("cond.zero{i}.w")], vars.params[&format!("cond.zero{i}.b")]);
            h = h.add(inject);
            c = Some(if i + 1 < l { ci.avg_pool2() } else { ci });
        }
        skips.push(h);
        if i + 1 < l {
            h = h.avg_pool2();
        }
    }
    let mut d = skips[l - 1];
    for i in (0..l - 1).rev() {
        d = d.upsample2().concat_c(skips[i]);
        d = d.conv2d(vars.params[&format!("dec{i}.conv1.w")], vars.params[&format!("dec{i}.conv1.b")]).silu();
        d = d.add_channel_bias(vars.proj(&format!("dec{i}.emb.w"), emb));
        d = d.conv2d(vars.params[&format!("dec{i}.conv2.w")], vars.params[&format!("dec{i}.conv2.b")]).silu();
    }
    d.conv2d(vars.params["out.w"], vars.params["out.b"])
}

/// Non-differentiable prediction entry point.
pub fn denoise_predict<S: Scalar>(
    params: &DenoiserParams<S>,
    x_t: &Tensor<S>,
    t: usize,
    cond: Option<&ConditionInput<S>>,
    prompt: &PromptSpec,
    adapters: Option<&AdapterSet<S>>,
) -> Result<Tensor<S>> {
    let ids = params.resolve_prompt(prompt)?;
    if x_t.shape().len() != 3 || x_t.shape()[0] != 1 {
        return Err(Error::geometry("x_t must be [1,H,W]"));
    }
    if let Some(ci) = cond {
        if ci.dem.height != x_t.shape()[1] || ci.dem.width != x_t.shape()[2] {
            return Err(Error::geometry("condition shape does not match x_t"));
        }
    }
    let tape = Tape::new();
    let mut vars = ForwardVars::from_params(&tape, params);
    if let Some(ad) = adapters {
        vars = vars.with_adapters(&tape, ad);
    }
    let x = tape.var(x_t.clone());
    let cvar = cond.map(|ci| tape.var(ci.normalized()));
    let out = forward(&tape, &params.arch, &vars, x, t, cvar, &ids);
    Ok((*out.value()).clone())
}

/// A denoiser bound to its conditioning, usable by the DDIM sampler.
pub struct ConditionedDenoiser<'a, S: Scalar> {
    pub params: &'a DenoiserParams<S>,
    pub cond: Option<&'a ConditionInput<S>>,
    pub prompt: PromptSpec,
    pub adapters: Option<&'a AdapterSet<S>>,
}

impl<S: Scalar> NoisePredictor<S> for ConditionedDenoiser<'_, S> {
    fn predict_eps(&self, x: &Tensor<S>, t: usize) -> Tensor<S> {
        denoise_predict(self.params, x, t, self.cond, &self.prompt, self.adapters)
            .expect("shapes validated by caller")
    }
}
