//! Experiment orchestration: dataset assembly with a scene-level train/test
//! split, method-comparison runs over missing-ratio grids, report tables,
//! and plot rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{fill_harmonic, fill_last_frame, fill_nearest, AutoencoderParams};
use crate::denoiser::{ConditionInput, ConditionedDenoiser, DenoiserParams, PromptSpec};
use crate::diffusion::{inpaint, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::mask::{apply_mask, random_mask};
use crate::metrics::{MetricsReport, Scope, CSV_HEADER};
use crate::perceptual::{adapt, FeatureExtractor, KernelConfig};
use crate::raster::{export_preview, Raster};
use crate::scalar::Scalar;
use crate::scene::{synth_band, synth_dem, synth_timeseries, SceneConfig};
use crate::training::TrainItem;

pub const REGISTERED_METHODS: [&str; 6] =
    ["nearest", "harmonic", "autoencoder", "diffusion", "diffusion+adapter", "last-frame"];

pub const SEED_ENV_VAR: &str = "SATMAKER_SEED";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: u8,
    pub methods: Vec<String>,
    pub missing_ratios: Vec<f64>,
    pub bands: Vec<String>,
    pub seeds: Vec<u64>,
    pub adapter: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            task: 1,
            methods: vec!["nearest".into(), "harmonic".into()],
            missing_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            bands: vec!["red".into()],
            seeds: vec![0],
            adapter: false,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.task == 1 || self.task == 2) {
            return Err(Error::config("task must be 1 or 2"));
        }
        for m in &self.methods {
            if !REGISTERED_METHODS.contains(&m.as_str()) {
                return Err(Error::config(format!("unknown method `{m}`")));
            }
            if m == "diffusion+adapter" && !self.adapter {
                return Err(Error::config("diffusion+adapter requires adapter: on"));
            }
            if m == "last-frame" && self.task != 2 {
                return Err(Error::config("last-frame is a time-series (task-2) method"));
            }
        }
        if self.methods.is_empty() || self.bands.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("methods, bands, and seeds must be non-empty"));
        }
        for &r in &self.missing_ratios {
            if !(0.0 < r && r <= 0.95) {
                return Err(Error::config(format!("missing ratio {r} outside (0, 0.95]")));
            }
        }
        Ok(())
    }
}

fn seeds_from(spec_seeds: &[u64], env: Option<&str>) -> Result<Vec<u64>> {
    match env {
        Some(v) => {
            let s = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("{SEED_ENV_VAR} must be an integer, got `{v}`")))?;
            Ok(vec![s])
        }
        None => Ok(spec_seeds.to_vec()),
    }
}

/// Spec seeds unless the environment override is set.
pub fn effective_seeds(spec: &ExperimentSpec) -> Result<Vec<u64>> {
    let env = std::env::var(SEED_ENV_VAR).ok();
    seeds_from(&spec.seeds, env.as_deref())
}

/// One evaluation unit: a single-band truth tile with its conditioning.
#[derive(Clone, Debug)]
pub struct DataCase<S> {
    pub scene: usize,
    pub site: String,
    pub band: String,
    pub image: Raster<S>,
    pub dem: Raster<S>,
    pub prompt: PromptSpec,
    /// preceding frame, present for task-2 series
    pub previous: Option<Raster<S>>,
}

impl<S: Scalar> DataCase<S> {
    pub fn to_train_item(&self) -> TrainItem<S> {
        TrainItem { image: self.image.clone(), dem: Some(self.dem.clone()), prompt: self.prompt.clone() }
    }
}

/// All prompt tokens occurring in a case list, deduplicated and sorted.
pub fn prompt_vocab<S: Scalar>(cases: &[DataCase<S>]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for c in cases {
        for t in c.prompt.tokens().expect("cases carry valid prompts") {
            set.insert(t);
        }
    }
    set.into_iter().collect()
}

fn scene_cases<S: Scalar>(task: u8, scene: usize, cfg: &SceneConfig, bands: &[String]) -> Result<Vec<DataCase<S>>> {
    let site = format!("s{scene}");
    let dem = synth_dem::<S>(cfg)?;
    let mut cases = Vec::new();
    match task {
        1 => {
            for band in bands {
                cases.push(DataCase {
                    scene,
                    site: site.clone(),
                    band: band.clone(),
                    image: synth_band(&dem, band, 0.0, cfg)?,
                    dem: dem.clone(),
                    prompt: PromptSpec::task1(&site, band),
                    previous: None,
                });
            }
        }
        2 => {
            let frames = synth_timeseries(&dem, 4, cfg)?;
            for day in 1..frames.len() {
                for band in bands {
                    cases.push(DataCase {
                        scene,
                        site: site.clone(),
                        band: band.clone(),
                        image: frames[day].select_band(band)?,
                        dem: dem.clone(),
                        prompt: PromptSpec::task2(&site, &format!("2024-{day:02}"), day, band),
                        previous: Some(frames[day - 1].select_band(band)?),
                    });
                }
            }
        }
        t => return Err(Error::config(format!("task must be 1 or 2, got {t}"))),
    }
    Ok(cases)
}

/// Refuses splits where any scene contributes to both sides.
pub fn check_disjoint<S: Scalar>(train: &[DataCase<S>], test: &[DataCase<S>]) -> Result<()> {
    let train_scenes: BTreeSet<usize> = train.iter().map(|c| c.scene).collect();
    for c in test {
        if train_scenes.contains(&c.scene) {
            return Err(Error::Integrity(format!("scene {} appears in both splits", c.scene)));
        }
    }
    Ok(())
}

/// Seeded split at scene granularity: all tiles of a scene land on one side.
pub fn build_dataset<S: Scalar>(
    task: u8,
    scenes: &[SceneConfig],
    bands: &[String],
    split: (f64, f64),
    seed: u64,
) -> Result<(Vec<DataCase<S>>, Vec<DataCase<S>>)> {
    let (train_frac, test_frac) = split;
    if (train_frac + test_frac - 1.0).abs() > 1e-9 || train_frac < 0.0 || test_frac < 0.0 {
        return Err(Error::config("split fractions must be non-negative and sum to 1"));
    }
    if scenes.is_empty() {
        return Err(Error::config("no scenes"));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x736372616d626c65));
    let n_train = (train_frac * scenes.len() as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        let cases = scene_cases(task, idx, &scenes[idx], bands)?;
        if pos < n_train {
            train.extend(cases);
        } else {
            test.extend(cases);
        }
    }
    check_disjoint(&train, &test)?;
    Ok((train, test))
}

/// Trained artifacts and inference settings the methods draw on.
pub struct Models<S: Scalar> {
    pub denoiser: Option<DenoiserParams<S>>,
    pub adapters: Option<AdapterSet<S>>,
    pub autoencoder: Option<AutoencoderParams<S>>,
    pub sampler: SamplerConfig,
    pub schedule: NoiseSchedule<S>,
    pub extractor: FeatureExtractor<S>,
    pub kernel: KernelConfig,
    pub adapt_steps: usize,
    pub adapt_step_size: f64,
    pub lambda_style: f64,
    pub harmonic_iters: usize,
}

impl<S: Scalar> Models<S> {
    pub fn baseline_only(schedule: NoiseSchedule<S>, extractor: FeatureExtractor<S>) -> Self {
        Models {
            denoiser: None,
            adapters: None,
            autoencoder: None,
            sampler: SamplerConfig::default(),
            schedule,
            extractor,
            kernel: KernelConfig::default(),
            adapt_steps: 50,
            adapt_step_size: 0.01,
            lambda_style: 100.0,
            harmonic_iters: 500,
        }
    }
}

fn mix(seed: u64, salt: &str, a: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for b in salt.bytes() {
        h = h.wrapping_add(b as u64).wrapping_mul(0x100000001b3);
        h ^= h >> 29;
    }
    h ^ a.wrapping_mul(0xff51afd7ed558ccd)
}

/// Reconstruct one masked tile with the named method.
pub fn reconstruct<S: Scalar>(
    method: &str,
    case: &DataCase<S>,
    observed: &Raster<S>,
    mask: &crate::mask::Mask,
    models: &Models<S>,
    seed: u64,
) -> Result<Raster<S>> {
    match method {
        "nearest" => fill_nearest(observed, mask),
        "harmonic" => fill_harmonic(observed, mask, models.harmonic_iters, 1e-7),
        "last-frame" => {
            let prev = case
                .previous
                .as_ref()
                .ok_or_else(|| Error::config("last-frame needs a preceding frame"))?;
            fill_last_frame(observed, prev, mask)
        }
        "autoencoder" => {
            let ae = models.autoencoder.as_ref().ok_or_else(|| Error::config("no autoencoder model"))?;
            crate::baselines::ae_fill(ae, observed, mask)
        }
        "diffusion" | "diffusion+adapter" => {
            let params = models.denoiser.as_ref().ok_or_else(|| Error::config("no denoiser model"))?;
            let cond = ConditionInput::new(case.dem.clone())?;
            let predictor = ConditionedDenoiser {
                params,
                cond: Some(&cond),
                prompt: case.prompt.clone(),
                adapters: models.adapters.as_ref(),
            };
            let cfg = SamplerConfig { seed, ..models.sampler.clone() };
            let gen = inpaint(&predictor, observed, mask, &cfg, &models.schedule)?;
            if method == "diffusion+adapter" {
                adapt(
                    &gen,
                    observed,
                    mask,
                    models.adapt_steps,
                    models.adapt_step_size,
                    &models.extractor,
                    &models.kernel,
                    models.lambda_style,
                )
            } else {
                Ok(gen)
            }
        }
        m => Err(Error::config(format!("unknown method `{m}`"))),
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub rows: Vec<MetricsReport>,
    /// cell failures as "method,band,ratio: message"
    pub errors: Vec<String>,
    pub csv: String,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Run every (method, ratio, band) cell over the test cases and seeds.
/// Each cell aggregates tile metrics by mean; failures are recorded and
/// skipped without aborting the run. Both metric scopes are reported.
pub fn run_experiment<S: Scalar>(
    spec: &ExperimentSpec,
    cases: &[DataCase<S>],
    models: &Models<S>,
) -> Result<ExperimentResults> {
    spec.validate()?;
    if cases.is_empty() {
        return Err(Error::config("no test cases"));
    }
    let seeds = effective_seeds(spec)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let preview_dir = spec.out_dir.as_ref().map(|d| d.join("previews"));
    if let Some(d) = &preview_dir {
        std::fs::create_dir_all(d)?;
    }
    for method in &spec.methods {
        for &ratio in &spec.missing_ratios {
            for band in &spec.bands {
                let cell = format!("{method},{band},{ratio}");
                let mut per_scope: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
                // (rmse, recon, truth) extremes for previews
                let mut best: Option<(f64, Raster<S>, Raster<S>)> = None;
                let mut worst: Option<(f64, Raster<S>, Raster<S>)> = None;
                let mut failed = false;
                'cell: for &seed in &seeds {
                    for (ci, case) in cases.iter().enumerate().filter(|(_, c)| &c.band == band) {
                        let cell_seed = mix(seed, &cell, ci as u64);
                        let result = (|| -> Result<()> {
                            let mask = random_mask(
                                (case.image.height, case.image.width),
                                ratio,
                                cell_seed,
                                None,
                            )?;
                            let observed = apply_mask(&case.image, &mask, S::from_f64_(0.5))?;
                            let recon = reconstruct(method, case, &observed, &mask, models, cell_seed)?;
                            for scope in [Scope::Masked(&mask), Scope::Full] {
                                let rep = MetricsReport::compute(
                                    method,
                                    band,
                                    ratio,
                                    &recon,
                                    &case.image,
                                    scope,
                                    &models.extractor,
                                )?;
                                if matches!(scope, Scope::Masked(_)) {
                                    let r = rep.rmse;
                                    if best.as_ref().map_or(true, |(b, _, _)| r < *b) {
                                        best = Some((r, recon.clone(), case.image.clone()));
                                    }
                                    if worst.as_ref().map_or(true, |(w, _, _)| r > *w) {
                                        worst = Some((r, recon.clone(), case.image.clone()));
                                    }
                                }
                                per_scope.entry(rep.scope.clone()).or_default().push(rep);
                            }
                            Ok(())
                        })();
                        if let Err(e) = result {
                            errors.push(format!("{cell}: {e}"));
                            failed = true;
                            break 'cell;
                        }
                    }
                }
                if failed {
                    continue;
                }
                for (scope, reps) in per_scope {
                    rows.push(MetricsReport {
                        method: method.clone(),
                        band: band.clone(),
                        missing_ratio: ratio,
                        scope,
                        ssim: mean(&reps.iter().map(|r| r.ssim).collect::<Vec<_>>()),
                        psnr: mean(&reps.iter().map(|r| r.psnr).collect::<Vec<_>>()),
                        rmse: mean(&reps.iter().map(|r| r.rmse).collect::<Vec<_>>()),
                        mae: mean(&reps.iter().map(|r| r.mae).collect::<Vec<_>>()),
                        perceptual: mean(&reps.iter().map(|r| r.perceptual).collect::<Vec<_>>()),
                        n_pixels: reps.iter().map(|r| r.n_pixels).sum(),
                    });
                }
                if let Some(dir) = &preview_dir {
                    let tag = format!("{method}_{band}_{ratio}");
                    if let Some((_, recon, truth)) = &best {
                        export_preview(recon, band, 1.0, dir.join(format!("{tag}_best.png")))?;
                        export_preview(truth, band, 1.0, dir.join(format!("{tag}_best_truth.png")))?;
                    }
                    if let Some((_, recon, _)) = &worst {
                        export_preview(recon, band, 1.0, dir.join(format!("{tag}_worst.png")))?;
                    }
                }
            }
        }
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    // failed cells stay in the CSV as tagged comment lines so a sweep is
    // never silently shorter than its grid
    for e in &errors {
        let _ = writeln!(csv, "# error: {e}");
    }
    if let Some(dir) = &spec.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), &csv)?;
    }
    Ok(ExperimentResults { rows, errors, csv })
}

// ---------------------------------------------------------------------------
// report tables and plots
// ---------------------------------------------------------------------------

/// Methods-by-ratios grid for one metric; a pure reshaping of the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub metric: String,
    pub scope: String,
    pub methods: Vec<String>,
    pub ratios: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn parse_results_csv(csv: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::format("csv", "empty file"))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::format("csv", format!("unexpected header `{header}`")));
    }
    let cols: Vec<&str> = CSV_HEADER.split(',').collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format("csv", format!("row {} has {} fields", n + 2, fields.len())));
        }
        rows.push(cols.iter().zip(fields).map(|(c, f)| (c.to_string(), f.to_string())).collect());
    }
    Ok(rows)
}

/// PSNR and RMSE tables for one scope, values copied verbatim from the CSV.
pub fn sweep_report(csv: &str, scope: &str) -> Result<Vec<SweepTable>> {
    let rows = parse_results_csv(csv)?;
    let scoped: Vec<&BTreeMap<String, String>> = rows.iter().filter(|r| r["scope"] == scope).collect();
    if scoped.is_empty() {
        return Err(Error::format("csv", format!("no rows with scope `{scope}`")));
    }
    let methods: Vec<String> = {
        let mut seen = Vec::new();
        for r in &scoped {
            if !seen.contains(&r["method"]) {
                seen.push(r["method"].clone());
            }
        }
        seen
    };
    let ratios: Vec<String> = {
        let mut set: Vec<String> = scoped.iter().map(|r| r["missing_ratio"].clone()).collect();
        set.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).partial_cmp(&b.parse::<f64>().unwrap_or(0.0)).unwrap());
        set.dedup();
        set
    };
    let mut tables = Vec::new();
    for metric in ["psnr", "rmse"] {
        let mut cells = vec![vec![None; ratios.len()]; methods.len()];
        for r in &scoped {
            let mi = methods.iter().position(|m| *m == r["method"]).unwrap();
            let ri = ratios.iter().position(|x| *x == r["missing_ratio"]).unwrap();
            cells[mi][ri] = r[metric].parse::<f64>().ok();
        }
        tables.push(SweepTable {
            metric: metric.to_string(),
            scope: scope.to_string(),
            methods: methods.clone(),
            ratios: ratios.clone(),
            cells,
        });
    }
    Ok(tables)
}

pub fn render_table_markdown(t: &SweepTable) -> String {
    let mut out = format!("# {} ({} scope)\n\n| method |", t.metric, t.scope);
    for r in &t.ratios {
        out.push_str(&format!(" {r} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(t.ratios.len()));
    out.push('\n');
    for (m, row) in t.methods.iter().zip(&t.cells) {
        out.push_str(&format!("| {m} |"));
        for c in row {
            match c {
                Some(v) => out.push_str(&format!(" {v} |")),
                None => out.push_str(" (missing) |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Line plot of the table, one polyline per method.
pub fn render_table_svg(t: &SweepTable) -> String {
    let (w, h, ml, mb) = (520.0, 340.0, 60.0, 40.0);
    let values: Vec<f64> = t.cells.iter().flatten().filter_map(|c| *c).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |i: usize| ml + (w - ml - 20.0) * i as f64 / (t.ratios.len().max(2) - 1) as f64;
    let py = |v: f64| (h - mb) - (h - mb - 20.0) * (v - lo) / span;
    let colors = ["#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d68910", "#2c3e50"];
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#
    );
    svg.push_str(&format!(
        r#"<text x="{}" y="16" text-anchor="middle">{} vs missing ratio ({})</text>"#,
        w / 2.0,
        t.metric,
        t.scope
    ));
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="20" x2="{ml}" y2="{}" stroke="black"/><line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        h - mb,
        w - 20.0,
        h - mb
    ));
    for (i, r) in t.ratios.iter().enumerate() {
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{r}</text>"#,
            px(i),
            h - mb + 16.0
        ));
    }
    svg.push_str(&format!(r#"<text x="{}" y="{}">{:.4}</text>"#, 4.0, py(lo) + 4.0, lo));
    svg.push_str(&format!(r#"<text x="{}" y="{}">{:.4}</text>"#, 4.0, py(hi) + 4.0, hi));
    for (mi, (m, row)) in t.methods.iter().zip(&t.cells).enumerate() {
        let color = colors[mi % colors.len()];
        let pts: Vec<String> = row
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|v| format!("{:.1},{:.1}", px(i), py(v))))
            .collect();
        if pts.len() > 1 {
            svg.push_str(&format!(
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            ));
        }
        for (i, c) in row.iter().enumerate() {
            if let Some(v) = c {
                svg.push_str(&format!(r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(i), py(*v)));
            }
        }
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" fill="{color}">{m}</text>"#,
            w - 150.0,
            30.0 + 14.0 * mi as f64
        ));
    }
    svg.push_str("</svg>");
    svg
}

/// Markdown tables and SVG plots for both scopes, written next to the CSV.
pub fn write_report(csv: &str, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for scope in ["masked", "full"] {
        let tables = match sweep_report(csv, scope) {
            Ok(t) => t,
            Err(Error::Format { .. }) if scope == "full" => continue,
            Err(e) => return Err(e),
        };
        for t in tables {
            std::fs::write(
                out_dir.join(format!("table_{}_{scope}.md", t.metric)),
                render_table_markdown(&t),
            )?;
            std::fs::write(out_dir.join(format!("plot_{}_{scope}.svg", t.metric)), render_table_svg(&t))?;
        }
    }
    Ok(())
}
