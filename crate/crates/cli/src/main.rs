//! Command-line front end: synthetic scene generation, mask generation,
//! training, inpainting inference, style adaptation, evaluation, sweep
//! experiments, and report rendering.
//!
//! Every flag has a JSON config-file equivalent (`--config file.json` with
//! keys named after the flags); explicit flags win over config values. The
//! `SATMAKER_SEED` environment variable overrides any configured seed.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use satfill_core::baselines::load_autoencoder;
use satfill_core::denoiser::{
    init_denoiser, ConditionInput, ConditionedDenoiser, DenoiserArch, PromptSpec,
};
use satfill_core::diffusion::{default_schedule, inpaint, make_schedule, SamplerConfig};
use satfill_core::harness::{
    build_dataset, run_experiment, write_report, ExperimentSpec, Models, SEED_ENV_VAR,
};
use satfill_core::lora::attach_lora;
use satfill_core::mask::{random_mask, Mask};
use satfill_core::metrics::{MetricsReport, Scope, CSV_HEADER};
use satfill_core::perceptual::{adapt, KernelConfig};
use satfill_core::raster::{export_preview, read_raster, write_raster, Raster};
use satfill_core::scene::{synth_band, synth_dem, synth_timeseries, SceneConfig};
use satfill_core::training::{
    load_adapters, run_training, TrainConfig, TrainItem, TrainState,
};
use satfill_core::{DenoiserParams, FeatureExtractor, Real};

#[derive(Parser)]
#[command(name = "satfill", about = "DEM- and prompt-conditioned raster gap filling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes as .rsr files plus a JSON manifest
    Synth(SynthArgs),
    /// Generate a random missing-pixel mask
    Mask(MaskArgs),
    /// Train the conditional denoiser (optionally LoRA adapters only)
    Train(TrainArgs),
    /// Inpaint an observed raster with a trained model
    Infer(InferArgs),
    /// Style-distribution correction of a generated tile
    Adapt(AdaptArgs),
    /// Metrics CSV for a (prediction, truth) pair
    Eval(EvalArgs),
    /// Method-by-missing-ratio experiment grid
    Sweep(SweepArgs),
    /// Tables and plots from a results CSV
    Report(ReportArgs),
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => Ok(Some(v.trim().parse::<u64>().with_context(|| {
            format!("{SEED_ENV_VAR} must be an unsigned integer, got `{v}`")
        })?)),
        Err(_) => Ok(None),
    }
}

fn load_config<T: DeserializeOwned>(path: &Option<PathBuf>) -> anyhow::Result<Option<T>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
        }
        None => Ok(None),
    }
}

fn or<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

/// "prefix:value" tokens, space- or comma-separated, e.g.
/// "site:s0 band:red" or "loc:s1,date:2024-03,day:3,band:nir".
fn parse_prompt(s: &str) -> anyhow::Result<PromptSpec> {
    let (mut site, mut loc, mut date, mut day, mut band) = (None, None, None, None, None);
    for tok in s.split([' ', ',']).filter(|t| !t.is_empty()) {
        let (prefix, value) = tok
            .split_once(':')
            .ok_or_else(|| anyhow!("prompt token `{tok}` is not prefix:value"))?;
        match prefix {
            "site" => site = Some(value.to_string()),
            "loc" => loc = Some(value.to_string()),
            "date" => date = Some(value.to_string()),
            "day" => day = Some(value.parse::<usize>().context("day token")?),
            "band" => band = Some(value.to_string()),
            p => bail!("unknown prompt token prefix `{p}`"),
        }
    }
    let band = band.ok_or_else(|| anyhow!("prompt needs a band: token"))?;
    let spec = match (site, loc) {
        (Some(site), None) => PromptSpec::task1(&site, &band),
        (None, Some(loc)) => PromptSpec::task2(
            &loc,
            &date.ok_or_else(|| anyhow!("task-2 prompt needs date:"))?,
            day.ok_or_else(|| anyhow!("task-2 prompt needs day:"))?,
            &band,
        ),
        _ => bail!("prompt needs exactly one of site: (task 1) or loc: (task 2)"),
    };
    spec.validate()?;
    Ok(spec)
}

fn read_mask(path: &Path) -> anyhow::Result<Mask> {
    Ok(Mask::from_raster(&read_raster::<Real>(path)?)?)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SynthArgs {
    /// JSON file providing defaults for any flag below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// comma-separated band subset; default is every configured band
    #[arg(long)]
    bands: Option<String>,
    #[arg(long)]
    task: Option<u8>,
    /// frames per scene for task 2
    #[arg(long)]
    frames: Option<usize>,
}

fn cmd_synth(cli: SynthArgs) -> anyhow::Result<()> {
    let file: SynthArgs = load_config(&cli.config)?.unwrap_or_default();
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let n_scenes = or(cli.scenes, file.scenes, 4);
    let size = or(cli.size, file.size, 64);
    let seed = env_seed()?.unwrap_or(or(cli.seed, file.seed, 0));
    let task = or(cli.task, file.task, 1);
    let frames = or(cli.frames, file.frames, 4);
    let base = SceneConfig { size, ..Default::default() };
    let bands: Vec<String> = match cli.bands.or(file.bands) {
        Some(s) => s.split(',').map(|b| b.trim().to_string()).collect(),
        None => base.bands(),
    };
    std::fs::create_dir_all(&out)?;
    let mut manifest_scenes = Vec::new();
    let mut items = Vec::new();
    for i in 0..n_scenes {
        let cfg = SceneConfig { size, seed: seed.wrapping_add(i as u64), ..base.clone() };
        let site = format!("s{i}");
        let dem = synth_dem::<Real>(&cfg)?;
        let dem_path = out.join(format!("scene{i}_dem.rsr"));
        write_raster(&dem, &dem_path)?;
        let mut files = Vec::new();
        match task {
            1 => {
                for band in &bands {
                    let img = synth_band(&dem, band, 0.0, &cfg)?;
                    let path = out.join(format!("scene{i}_{band}.rsr"));
                    write_raster(&img, &path)?;
                    files.push(serde_json::json!({ "band": band, "path": path }));
                    items.push(serde_json::json!({
                        "image": path, "dem": dem_path,
                        "prompt": PromptSpec::task1(&site, band),
                    }));
                }
            }
            2 => {
                let series = synth_timeseries(&dem, frames, &cfg)?;
                for (day, frame) in series.iter().enumerate() {
                    for band in &bands {
                        let img = frame.select_band(band)?;
                        let path = out.join(format!("scene{i}_t{day}_{band}.rsr"));
                        write_raster(&img, &path)?;
                        files.push(serde_json::json!({ "band": band, "day": day, "path": path }));
                        items.push(serde_json::json!({
                            "image": path, "dem": dem_path,
                            "prompt": PromptSpec::task2(&site, &format!("2024-{day:02}"), day, band),
                        }));
                    }
                }
            }
            t => bail!("task must be 1 or 2, got {t}"),
        }
        manifest_scenes.push(serde_json::json!({
            "id": site, "seed": cfg.seed, "dem": dem_path, "files": files,
        }));
    }
    let manifest = serde_json::json!({ "scenes": manifest_scenes, "items": items });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} scenes to {}", n_scenes, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct MaskArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// take the shape from an existing raster instead of --height/--width
    #[arg(long)]
    like: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_mask(cli: MaskArgs) -> anyhow::Result<()> {
    let file: MaskArgs = load_config(&cli.config)?.unwrap_or_default();
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let ratio = or(cli.ratio, file.ratio, 0.3);
    let seed = env_seed()?.unwrap_or(or(cli.seed, file.seed, 0));
    let shape = match cli.like.or(file.like) {
        Some(p) => {
            let r = read_raster::<Real>(&p)?;
            (r.height, r.width)
        }
        None => (
            cli.height.or(file.height).ok_or_else(|| anyhow!("--height or --like required"))?,
            cli.width.or(file.width).ok_or_else(|| anyhow!("--width or --like required"))?,
        ),
    };
    let mask = random_mask(shape, ratio, seed, None)?;
    write_raster(&mask.to_raster::<Real>(), &out)?;
    println!("wrote {} ({} of {} pixels missing)", out.display(), mask.count_missing(), shape.0 * shape.1);
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ManifestItem {
    image: PathBuf,
    #[serde(default)]
    dem: Option<PathBuf>,
    prompt: PromptSpec,
}

#[derive(Deserialize)]
struct Manifest {
    items: Vec<ManifestItem>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda_style: Option<f64>,
    /// 0 trains all weights; >0 freezes the base and trains adapters
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// tiny | small | default
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    t_count: Option<usize>,
    /// optimizer steps on the noise-prediction objective before the full
    /// composite objective takes over (0 = composite from the start)
    #[arg(long)]
    phase_a_steps: Option<usize>,
    #[arg(long)]
    ddim_steps_train: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// learning-rate multiplier for the conditioning branch
    #[arg(long)]
    cond_lr_scale: Option<f64>,
    /// checkpoint prefix to resume from (expects <prefix>.ckpt)
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    resume_epoch: Option<usize>,
}

fn pick_arch(name: &str) -> anyhow::Result<DenoiserArch> {
    match name {
        "tiny" => Ok(DenoiserArch::tiny()),
        "small" => Ok(DenoiserArch::small()),
        "default" => Ok(DenoiserArch::default()),
        a => bail!("unknown arch `{a}` (tiny | small | default)"),
    }
}

fn load_items(manifest: &Path) -> anyhow::Result<Vec<TrainItem<Real>>> {
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    let mut items = Vec::new();
    for (i, it) in m.items.iter().enumerate() {
        let image = read_raster::<Real>(&it.image).with_context(|| format!("manifest item {i}"))?;
        let dem = it.dem.as_ref().map(read_raster::<Real>).transpose()?;
        items.push(TrainItem { image, dem, prompt: it.prompt.clone() });
    }
    Ok(items)
}

fn cmd_train(cli: TrainArgs) -> anyhow::Result<()> {
    let file: TrainArgs = load_config(&cli.config)?.unwrap_or_default();
    let manifest = cli.manifest.or(file.manifest).ok_or_else(|| anyhow!("--manifest is required"))?;
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let cfg = TrainConfig {
        lr: or(cli.lr, file.lr, 5e-5),
        epochs: or(cli.epochs, file.epochs, 1),
        batch: or(cli.batch, file.batch, 4),
        lambda_style: or(cli.lambda_style, file.lambda_style, 100.0),
        phase_a_steps: or(cli.phase_a_steps, file.phase_a_steps, usize::MAX),
        ddim_steps_train: or(cli.ddim_steps_train, file.ddim_steps_train, 10),
        strength: or(cli.strength, file.strength, 0.9),
        seed: env_seed()?.unwrap_or(or(cli.seed, file.seed, 0)),
        kernel: KernelConfig::default(),
        checkpoint_every: or(cli.checkpoint_every, file.checkpoint_every, 0),
        cond_lr_scale: or(cli.cond_lr_scale, file.cond_lr_scale, 1.0),
    };
    let lora_rank = or(cli.lora_rank, file.lora_rank, 0);
    let items = load_items(&manifest)?;
    if items.is_empty() {
        bail!("manifest has no items");
    }
    let mut vocab: Vec<String> = items
        .iter()
        .flat_map(|it| it.prompt.tokens().unwrap_or_default())
        .collect();
    vocab.sort();
    vocab.dedup();
    let t_count = or(cli.t_count, file.t_count, 1000);
    let sched = if t_count == 1000 { default_schedule() } else { make_schedule(t_count, 1e-4, 2e-2)? };
    let params: DenoiserParams = match cli.resume.or(file.resume) {
        Some(prefix) => DenoiserParams::load(prefix.with_extension("ckpt"))?,
        None => {
            let arch = pick_arch(&or(cli.arch, file.arch, "small".into()))?;
            init_denoiser(&arch, &vocab, cfg.seed)?
        }
    };
    let adapters = if lora_rank > 0 {
        let targets = params.lora_default_targets();
        Some(attach_lora(&params, lora_rank, &targets, cfg.seed ^ 0x4c6f5261)?)
    } else {
        None
    };
    let size = items[0].image.height.min(items[0].image.width);
    let stages = (1..=5).take_while(|s| size % (1 << (s - 1)) == 0).count().min(5);
    let ex = FeatureExtractor::with_stages(stages, 0);
    let mut state = TrainState { params, adapters, epoch: or(cli.resume_epoch, file.resume_epoch, 0) };
    let log = run_training(&mut state, &items, &cfg, &sched, &ex, Some(&out))?;
    if let Some(last) = log.last() {
        println!(
            "trained {} steps; final total loss {:.6}; checkpoints in {}",
            log.len(),
            last.loss.total,
            out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct InferArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// checkpoint path (.ckpt)
    #[arg(long)]
    model: Option<PathBuf>,
    /// optional adapter checkpoint (.lora.ckpt)
    #[arg(long)]
    lora: Option<PathBuf>,
    #[arg(long)]
    dem: Option<PathBuf>,
    #[arg(long)]
    observed: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// e.g. "site:s0 band:red"
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_infer(cli: InferArgs) -> anyhow::Result<()> {
    let file: InferArgs = load_config(&cli.config)?.unwrap_or_default();
    let model = cli.model.or(file.model).ok_or_else(|| anyhow!("--model is required"))?;
    let observed_path = cli.observed.or(file.observed).ok_or_else(|| anyhow!("--observed is required"))?;
    let mask_path = cli.mask.or(file.mask).ok_or_else(|| anyhow!("--mask is required"))?;
    let prompt_text = cli.prompt.or(file.prompt).ok_or_else(|| anyhow!("--prompt is required"))?;
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let cfg = SamplerConfig {
        steps: or(cli.steps, file.steps, 50),
        eta: or(cli.eta, file.eta, 1.0),
        strength: or(cli.strength, file.strength, 0.9),
        seed: env_seed()?.unwrap_or(or(cli.seed, file.seed, 0)),
        ..Default::default()
    };
    let params = DenoiserParams::load(&model)?;
    let adapters = cli.lora.or(file.lora).map(load_adapters::<Real>).transpose()?;
    let observed = read_raster::<Real>(&observed_path)?;
    let mask = read_mask(&mask_path)?;
    let prompt = parse_prompt(&prompt_text)?;
    let cond = cli
        .dem
        .or(file.dem)
        .map(|p| -> anyhow::Result<_> { Ok(ConditionInput::new(read_raster::<Real>(&p)?)?) })
        .transpose()?;
    let predictor = ConditionedDenoiser {
        params: &params,
        cond: cond.as_ref(),
        prompt,
        adapters: adapters.as_ref(),
    };
    let sched = default_schedule();
    let result = inpaint(&predictor, &observed, &mask, &cfg, &sched)?;
    write_raster(&result, &out)?;
    let band = result.bands[0].clone();
    export_preview(&result, &band, 1.0, out.with_extension("png"))?;
    println!("wrote {} and {}", out.display(), out.with_extension("png").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AdaptArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda_style: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn extractor_for(image: &Raster<Real>) -> FeatureExtractor {
    let size = image.height.min(image.width);
    let stages = (1..=5).take_while(|s| size % (1 << (s - 1)) == 0).count().min(5);
    FeatureExtractor::with_stages(stages, 0)
}

fn cmd_adapt(cli: AdaptArgs) -> anyhow::Result<()> {
    let file: AdaptArgs = load_config(&cli.config)?.unwrap_or_default();
    let generated = read_raster::<Real>(
        &cli.generated.or(file.generated).ok_or_else(|| anyhow!("--generated is required"))?,
    )?;
    let reference = read_raster::<Real>(
        &cli.reference.or(file.reference).ok_or_else(|| anyhow!("--reference is required"))?,
    )?;
    let mask = read_mask(&cli.mask.or(file.mask).ok_or_else(|| anyhow!("--mask is required"))?)?;
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let ex = extractor_for(&generated);
    let result = adapt(
        &generated,
        &reference,
        &mask,
        or(cli.steps, file.steps, 50),
        or(cli.step_size, file.step_size, 0.01),
        &ex,
        &KernelConfig::default(),
        or(cli.lambda_style, file.lambda_style, 100.0),
    )?;
    write_raster(&result, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
    /// optional; adds masked-scope rows and sets the default missing ratio
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    missing_ratio: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(cli: EvalArgs) -> anyhow::Result<()> {
    let file: EvalArgs = load_config(&cli.config)?.unwrap_or_default();
    let truth = read_raster::<Real>(&cli.truth.or(file.truth).ok_or_else(|| anyhow!("--truth is required"))?)?;
    let pred = read_raster::<Real>(&cli.pred.or(file.pred).ok_or_else(|| anyhow!("--pred is required"))?)?;
    let method = or(cli.method, file.method, "unnamed".into());
    let mask = cli.mask.or(file.mask).map(|p| read_mask(&p)).transpose()?;
    let ratio = cli.missing_ratio.or(file.missing_ratio).unwrap_or_else(|| {
        mask.as_ref()
            .map(|m| m.count_missing() as f64 / (m.height * m.width) as f64)
            .unwrap_or(0.0)
    });
    let ex = extractor_for(&truth);
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for band in &truth.bands {
        let tb = truth.select_band(band)?;
        let pb = pred.select_band(band)?;
        let mut scopes = vec![Scope::Full];
        if let Some(m) = &mask {
            scopes.push(Scope::Masked(m));
        }
        for scope in scopes {
            let row = MetricsReport::compute(&method, band, ratio, &pb, &tb, scope, &ex)?;
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
    }
    match cli.out.or(file.out) {
        Some(p) => {
            std::fs::write(&p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SweepArgs {
    /// experiment spec JSON (task, methods, missing_ratios, bands, seeds,
    /// adapter, out_dir); doubles as the config file for this subcommand
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    lora: Option<PathBuf>,
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    scene_seed: Option<u64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_sweep(cli: SweepArgs) -> anyhow::Result<()> {
    let file: SweepArgs = load_config(&cli.config)?.unwrap_or_default();
    let spec_path = cli.spec.or(file.spec).ok_or_else(|| anyhow!("--spec is required"))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path)?)
        .with_context(|| format!("parsing {}", spec_path.display()))?;
    if let Some(out) = cli.out.or(file.out) {
        spec.out_dir = Some(out);
    }
    spec.validate()?;
    let n_scenes = or(cli.scenes, file.scenes, 10);
    let size = or(cli.size, file.size, 64);
    let scene_seed = or(cli.scene_seed, file.scene_seed, 7);
    let train_frac = or(cli.train_frac, file.train_frac, 0.8);
    let scene_cfgs: Vec<SceneConfig> = (0..n_scenes)
        .map(|i| SceneConfig { size, seed: scene_seed.wrapping_add(i as u64), ..Default::default() })
        .collect();
    let (_, test) = build_dataset::<Real>(
        spec.task,
        &scene_cfgs,
        &spec.bands,
        (train_frac, 1.0 - train_frac),
        scene_seed,
    )?;
    let stages = (1..=5).take_while(|s| size % (1 << (s - 1)) == 0).count().min(5);
    let mut models = Models::baseline_only(default_schedule(), FeatureExtractor::with_stages(stages, 0));
    if let Some(p) = cli.model.or(file.model) {
        models.denoiser = Some(DenoiserParams::load(&p)?);
    }
    if let Some(p) = cli.lora.or(file.lora) {
        models.adapters = Some(load_adapters(&p)?);
    }
    if let Some(p) = cli.autoencoder.or(file.autoencoder) {
        models.autoencoder = Some(load_autoencoder(&p)?);
    }
    let res = run_experiment(&spec, &test, &models)?;
    match &spec.out_dir {
        Some(d) => println!(
            "{} rows, {} cell errors -> {}",
            res.rows.len(),
            res.errors.len(),
            d.join("results.csv").display()
        ),
        None => print!("{}", res.csv),
    }
    for e in &res.errors {
        eprintln!("cell failed: {e}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_report(cli: ReportArgs) -> anyhow::Result<()> {
    let file: ReportArgs = load_config(&cli.config)?.unwrap_or_default();
    let csv_path = cli.csv.or(file.csv).ok_or_else(|| anyhow!("--csv is required"))?;
    let out = cli.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let csv = std::fs::read_to_string(&csv_path)?;
    write_report(&csv, &out)?;
    println!("wrote tables and plots to {}", out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Mask(a) => cmd_mask(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Adapt(a) => cmd_adapt(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
