use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvs_deblur::metrics::{mean_rbew, psnr, ssim, DiskGeometry};
use cvs_deblur::net::{forward_at, restore, restore_sequence, ArchConfig, ModelParams};
use cvs_deblur::sensor::{
    compute_exposure, gen_rotating_disk, make_sample, moving_pattern_sequence, read_sample, write_sample, CvsSample, DiskScene,
    ExposureConfig, Frame, PatternConfig, MAX_TD_TAIL,
};
use cvs_deblur::train::{load_state, planned_steps, save_state, train_from, write_history_csv, TrainError, TrainState, MODEL_FILE};
use cvs_deblur::autograd::OptimState;
use image::{Rgb, RgbImage};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::images::{read_sequence, write_both};
use crate::manifest::Recorder;
use crate::{DatagenArgs, DiskBenchArgs, EvalArgs, Invalid, Numeric, RunConfig, SampleArgs, TrainArgs, ValidateArgs};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Directories under `root` (inclusive) that hold a `meta.json`, sorted.
pub fn find_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("meta.json").is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(invalid(format!("no samples under {}", root.display())));
    }
    Ok(found)
}

fn load_dataset(root: &Path) -> Result<Vec<(PathBuf, CvsSample)>> {
    find_samples(root)?
        .into_par_iter()
        .map(|dir| {
            let s = read_sample(&dir).with_context(|| format!("reading sample {}", dir.display()))?;
            Ok((dir, s))
        })
        .collect()
}

fn sample_name(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let name = rel.to_string_lossy();
    if name.is_empty() { dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default() } else { name.into_owned() }
}

fn load_model(path: &Path, expected: Option<&ArchConfig>) -> Result<ModelParams> {
    let model = match expected {
        Some(arch) => ModelParams::load_expecting(path, arch),
        None => ModelParams::load(path),
    };
    model.with_context(|| format!("loading checkpoint {}", path.display()))
}

fn sequences(args: &DatagenArgs, frames: usize, seed: u64) -> Result<Vec<(String, Vec<Frame>)>> {
    if let Some(count) = args.synthetic {
        return Ok((0..count)
            .map(|i| {
                let cfg = PatternConfig::random(args.height, args.width, frames, seed.wrapping_add(i as u64));
                (format!("syn_{i:04}"), moving_pattern_sequence(&cfg))
            })
            .collect());
    }
    let root = args.input.as_ref().expect("clap requires --input without --synthetic");
    let has_pngs = !crate::images::numbered_pngs(root)?.is_empty();
    let dirs: Vec<PathBuf> = if has_pngs {
        vec![root.clone()]
    } else {
        let mut d: Vec<PathBuf> = fs::read_dir(root)
            .with_context(|| format!("listing {}", root.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        d.retain(|p| p.is_dir());
        d.sort();
        d
    };
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "seq".into());
            Ok((name, read_sequence(d, args.srgb_decode)?))
        })
        .collect()
}

pub fn datagen(args: &DatagenArgs, seed: u64, out: &Path, rec: &mut Recorder) -> Result<()> {
    if args.exposures.is_empty() {
        return Err(invalid("at least one exposure is required"));
    }
    let exposures: Vec<ExposureConfig> =
        args.exposures.iter().map(|&t| compute_exposure(t, args.tau_diff)).collect::<Result<_, _>>().map_err(|e| invalid(e.to_string()))?;
    rec.config(&json!({
        "exposures_us": args.exposures,
        "tau_diff_us": args.tau_diff,
        "random_exposure": args.random_exposure,
        "tail_headroom": args.tail_headroom,
        "srgb_decode": args.srgb_decode,
        "synthetic": args.synthetic,
        "height": args.height,
        "width": args.width,
    }));
    if let Some(input) = &args.input {
        rec.input(input);
    }
    let max_n = exposures.iter().map(|e| e.n).max().expect("non-empty");
    let seqs = sequences(args, max_n + MAX_TD_TAIL, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for (name, frames) in &seqs {
        let chosen: Vec<&ExposureConfig> =
            if args.random_exposure { vec![&exposures[rng.gen_range(0..exposures.len())]] } else { exposures.iter().collect() };
        jobs.extend(chosen.into_iter().map(|e| (name, frames, *e)));
    }
    let results: Vec<Option<PathBuf>> = jobs
        .par_iter()
        .map(|(name, frames, e)| -> Result<Option<PathBuf>> {
            let needed = e.n + if args.tail_headroom { MAX_TD_TAIL } else { 0 };
            if frames.len() < needed {
                return Ok(None);
            }
            let take = frames.len().min(e.n + MAX_TD_TAIL);
            let sample = make_sample(&frames[..take], *e, e.mid_index).map_err(|err| invalid(format!("{name}: {err}")))?;
            let dir = out.join(format!("{name}_t{}", e.t_rgb_us.round() as u64));
            write_sample(&dir, &sample)?;
            Ok(Some(dir))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        warn!("skipped {skipped} sequence/exposure pair(s) with too few frames");
    }
    let written: Vec<PathBuf> = results.into_iter().flatten().collect();
    info!("wrote {} sample(s) to {}", written.len(), out.display());
    rec.summary(json!({ "sequences": seqs.len(), "samples": written.len(), "skipped": skipped }));
    rec.outputs(written);
    Ok(())
}

pub fn train(args: &TrainArgs, config: RunConfig, seed: Option<u64>, out: &Path, rec: &mut Recorder) -> Result<()> {
    let mut tc = config.train;
    if let Some(s) = seed {
        tc.seed = s;
        tc.init_seed = s;
    }
    if let Some(steps) = args.steps {
        tc.max_steps = Some(steps);
    }
    if let Some(epochs) = args.epochs {
        tc.epochs = epochs;
    }
    tc.validate().map_err(|e| invalid(e.to_string()))?;
    let arch = config.arch.with_ablation(args.ablate);
    arch.validate().map_err(|e| invalid(e.to_string()))?;
    rec.config(&RunConfig { train: tc.clone(), arch });
    rec.manifest.seed = tc.seed;
    rec.input(&args.dataset);

    let data = load_dataset(&args.dataset)?;
    let samples: Vec<CvsSample> = data.into_iter().map(|(_, s)| s).collect();
    let state = if args.resume {
        let state = load_state(out).with_context(|| format!("resuming from {}", out.display()))?;
        if state.model.arch != arch {
            return Err(invalid(format!("stored architecture {:?} differs from the requested {:?}", state.model.arch, arch)));
        }
        info!("resuming at step {}", state.step);
        state
    } else {
        let mut model = ModelParams::init(&arch, tc.init_seed)?;
        if tc.zero_init_output {
            model.zero_output();
        }
        TrainState { model, optim: OptimState::new(tc.adamw()), step: 0, history: Vec::new() }
    };
    let total = planned_steps(&samples, &tc);
    info!("{} sample(s), {} parameters, {total} planned steps", samples.len(), state.model.numel());
    let every = (total / 20).max(1);
    let outcome = train_from(state, &samples, &tc, |r| {
        if r.step % every == 0 || r.step + 1 == total {
            info!("step {:>6}/{total}  lr {:.3e}  loss {:.4}", r.step + 1, r.lr, r.loss);
        }
        ControlFlow::Continue(())
    })
    .map_err(|e| match e {
        TrainError::NonFinite { .. } => anyhow::Error::new(Numeric(e.to_string())),
        other => anyhow::Error::new(other),
    })?;

    let state = TrainState { model: outcome.model, optim: outcome.optim, step: outcome.history.len(), history: outcome.history };
    save_state(out, &state)?;
    let csv = out.join("loss.csv");
    write_history_csv(fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?, &state.history)?;
    rec.summary(json!({
        "steps": state.step,
        "final_loss": state.history.last().map(|r| r.loss),
        "ablation": args.ablate.name(),
    }));
    rec.outputs([out.join(MODEL_FILE), csv]);
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

impl Quality {
    fn of(pred: &Frame, gt: &Frame) -> Result<Self> {
        Ok(Self { psnr: psnr(pred, gt)?, ssim: ssim(pred, gt)? })
    }

    fn mean(items: impl Iterator<Item = Self>) -> Self {
        let v: Vec<Self> = items.collect();
        let n = v.len().max(1) as f64;
        Self { psnr: v.iter().map(|q| q.psnr).sum::<f64>() / n, ssim: v.iter().map(|q| q.ssim).sum::<f64>() / n }
    }
}

#[derive(Debug, Serialize)]
struct SampleScore {
    name: String,
    n: usize,
    restored: Quality,
    blurry: Quality,
}

pub fn eval(args: &EvalArgs, arch: Option<&ArchConfig>, out: &Path, rec: &mut Recorder) -> Result<()> {
    rec.input(&args.dataset);
    rec.input(&args.checkpoint);
    let model = load_model(&args.checkpoint, arch).map_err(|e| match e.root_cause().to_string().contains("mismatch") {
        true => invalid(format!("{e:#}")),
        false => e,
    })?;
    rec.config(&model.arch);
    let data = load_dataset(&args.dataset)?;
    let scores: Vec<SampleScore> = data
        .par_iter()
        .map(|(dir, s)| {
            let restored = restore(&model, s).with_context(|| format!("restoring {}", dir.display()))?;
            Ok(SampleScore {
                name: sample_name(&args.dataset, dir),
                n: s.exposure.n,
                restored: Quality::of(&restored, s.target())?,
                blurry: Quality::of(&s.blur, s.target())?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = json!({
        "restored": Quality::mean(scores.iter().map(|s| s.restored)),
        "blurry": Quality::mean(scores.iter().map(|s| s.blurry)),
    });
    info!("{} sample(s): {mean}", scores.len());
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&json!({ "samples": scores, "mean": mean }))?)
        .with_context(|| format!("writing {}", path.display()))?;
    rec.summary(json!({ "samples": scores.len(), "mean": mean }));
    rec.output(&path);
    Ok(())
}

fn load_pair(args: &SampleArgs, rec: &mut Recorder) -> Result<(CvsSample, ModelParams)> {
    rec.input(&args.sample);
    rec.input(&args.checkpoint);
    let sample = read_sample(&args.sample).with_context(|| format!("reading sample {}", args.sample.display()))?;
    let model = load_model(&args.checkpoint, None)?;
    rec.config(&model.arch);
    Ok((sample, model))
}

pub fn infer(args: &SampleArgs, out: &Path, rec: &mut Recorder) -> Result<()> {
    let (sample, model) = load_pair(args, rec)?;
    let k = args.k.unwrap_or(sample.exposure.mid_index);
    if k >= sample.exposure.n {
        return Err(invalid(format!("--k {k} outside 0..{}", sample.exposure.n)));
    }
    let restored = forward_at(&model, &sample, k)?;
    let quality = Quality::of(&restored, &sample.gt[k])?;
    info!("restored frame {k}: {:.2} dB, SSIM {:.4}", quality.psnr, quality.ssim);
    rec.summary(json!({ "k": k, "vs_gt": quality }));
    rec.outputs(write_both(out, "restored", &restored)?);
    Ok(())
}

pub fn video(args: &SampleArgs, out: &Path, rec: &mut Recorder) -> Result<()> {
    let (sample, model) = load_pair(args, rec)?;
    let frames = restore_sequence(&model, &sample)?;
    for (k, f) in frames.iter().enumerate() {
        rec.outputs(write_both(out, &format!("frame_{k:02}"), f)?);
    }
    info!("wrote {} frame(s)", frames.len());
    rec.summary(json!({ "frames": frames.len() }));
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DiskCell {
    pub rpm: f64,
    pub t_rgb_us: f64,
    pub n: usize,
    pub illumination: f64,
    pub mean_rbew: Option<f64>,
    pub edges_used: usize,
    pub excluded: usize,
    pub error: Option<String>,
}

fn disk_cell(model: &ModelParams, args: &DiskBenchArgs, rpm: f64, e: ExposureConfig, illumination: f64) -> Result<DiskCell> {
    let fps = 1e6 / e.tau_diff_us;
    let frames = gen_rotating_disk(args.sectors, rpm, fps, e.n, args.size, illumination);
    let sample = make_sample(&frames, e, e.mid_index)?;
    let restored = restore(model, &sample)?;
    let reference = gen_rotating_disk(args.sectors, 0.0, fps, 1, args.size, illumination).remove(0);
    let scene = DiskScene::new(args.sectors, rpm, fps, args.size, illumination);
    let geometry = DiskGeometry { center: scene.center(), radius: 0.7 * scene.disk_radius(), n_samples: 1440, sectors: args.sectors };
    let mut cell =
        DiskCell { rpm, t_rgb_us: e.t_rgb_us, n: e.n, illumination, mean_rbew: None, edges_used: 0, excluded: 0, error: None };
    match mean_rbew(&restored, &reference, &geometry) {
        Ok(r) => {
            cell.mean_rbew = Some(r.mean_rbew);
            cell.edges_used = r.edges.iter().filter(|e| e.rbew.is_some()).count();
            cell.excluded = r.excluded;
        }
        Err(err) => cell.error = Some(err.to_string()),
    }
    Ok(cell)
}

/// Maps `t` in `[0, 1]` from dark blue through yellow to red.
fn heat(t: f64) -> Rgb<u8> {
    let stops = [(0.0, [30.0, 60.0, 160.0]), (0.5, [240.0, 220.0, 60.0]), (1.0, [200.0, 30.0, 30.0])];
    let t = t.clamp(0.0, 1.0);
    let i = if t <= 0.5 { 0 } else { 1 };
    let (t0, c0) = stops[i];
    let (t1, c1) = stops[i + 1];
    let u = (t - t0) / (t1 - t0);
    Rgb([0, 1, 2].map(|c| (c0[c] + u * (c1[c] - c0[c])).round() as u8))
}

/// One block per illumination: rows are exposures, columns are speeds. Failed cells are gray.
fn heatmap(cells: &[DiskCell], n_rpm: usize, n_exp: usize, n_illum: usize) -> RgbImage {
    const CELL: u32 = 24;
    const GAP: u32 = 4;
    let hi = cells.iter().filter_map(|c| c.mean_rbew).fold(1.0, f64::max);
    let span = (hi - 1.0).max(1e-9);
    let block_h = n_exp as u32 * CELL + GAP;
    let mut img = RgbImage::from_pixel(n_rpm as u32 * CELL, n_illum as u32 * block_h - GAP, Rgb([255, 255, 255]));
    for (idx, cell) in cells.iter().enumerate() {
        let (li, rest) = (idx / (n_exp * n_rpm), idx % (n_exp * n_rpm));
        let (ei, ri) = (rest / n_rpm, rest % n_rpm);
        let color = cell.mean_rbew.map_or(Rgb([128, 128, 128]), |v| heat((v - 1.0) / span));
        let (x0, y0) = (ri as u32 * CELL, li as u32 * block_h + ei as u32 * CELL);
        for y in y0..y0 + CELL - 1 {
            for x in x0..x0 + CELL - 1 {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

pub fn disk_bench(args: &DiskBenchArgs, out: &Path, rec: &mut Recorder) -> Result<()> {
    if args.rpm.is_empty() || args.exposures.is_empty() || args.illuminations.is_empty() {
        return Err(invalid("rpm, exposure and illumination lists must be non-empty"));
    }
    if args.rpm.iter().chain(&args.illuminations).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("rpm and illumination values must be finite and non-negative"));
    }
    rec.input(&args.checkpoint);
    rec.config(&json!({
        "rpm": args.rpm,
        "exposures_us": args.exposures,
        "illuminations": args.illuminations,
        "size": args.size,
        "sectors": args.sectors,
    }));
    let model = load_model(&args.checkpoint, None)?;
    let exposures: Vec<ExposureConfig> = args
        .exposures
        .iter()
        .map(|&t| compute_exposure(t, cvs_deblur::sensor::DEFAULT_TAU_DIFF_US))
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(e.to_string()))?;
    let mut grid = Vec::new();
    for &illum in &args.illuminations {
        for e in &exposures {
            for &rpm in &args.rpm {
                grid.push((rpm, *e, illum));
            }
        }
    }
    let cells: Vec<DiskCell> = grid.par_iter().map(|&(rpm, e, illum)| disk_cell(&model, args, rpm, e, illum)).collect::<Result<_>>()?;
    let failed = cells.iter().filter(|c| c.mean_rbew.is_none()).count();
    if failed > 0 {
        warn!("{failed} cell(s) without a usable fit");
    }
    let json_path = out.join("disk_bench.json");
    let report = json!({ "rpm": args.rpm, "exposures_us": args.exposures, "illuminations": args.illuminations, "cells": cells });
    fs::write(&json_path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", json_path.display()))?;
    let png_path = out.join("disk_bench.png");
    heatmap(&cells, args.rpm.len(), exposures.len(), args.illuminations.len())
        .save(&png_path)
        .with_context(|| format!("writing {}", png_path.display()))?;
    rec.summary(json!({ "cells": cells.len(), "failed": failed }));
    rec.outputs([json_path, png_path]);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleCheck {
    name: String,
    ok: bool,
    error: Option<String>,
    n: Option<usize>,
    /// Every ground-truth frame is identical.
    static_scene: Option<bool>,
    /// Largest deviation between the blurred frame and the target.
    blur_vs_gt: Option<f32>,
}

pub fn validate(args: &ValidateArgs, out: &Path, rec: &mut Recorder) -> Result<()> {
    rec.input(&args.dataset);
    let checks: Vec<SampleCheck> = find_samples(&args.dataset)?
        .par_iter()
        .map(|dir| {
            let name = sample_name(&args.dataset, dir);
            match read_sample(dir) {
                Ok(s) => {
                    let dev = s.blur.data().iter().zip(s.target().data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                    SampleCheck {
                        name,
                        ok: true,
                        error: None,
                        n: Some(s.exposure.n),
                        static_scene: Some(s.gt.iter().all(|g| g == &s.gt[0])),
                        blur_vs_gt: Some(dev),
                    }
                }
                Err(e) => SampleCheck { name, ok: false, error: Some(e.to_string()), n: None, static_scene: None, blur_vs_gt: None },
            }
        })
        .collect();
    let bad = checks.iter().filter(|c| !c.ok).count();
    let path = out.join("validation.json");
    fs::write(&path, serde_json::to_string_pretty(&checks)?).with_context(|| format!("writing {}", path.display()))?;
    rec.summary(json!({ "samples": checks.len(), "invalid": bad }));
    rec.output(&path);
    for c in checks.iter().filter(|c| !c.ok) {
        warn!("{}: {}", c.name, c.error.as_deref().unwrap_or_default());
    }
    if bad > 0 {
        bail!(Invalid(format!("{bad} of {} sample(s) failed validation", checks.len())));
    }
    info!("{} sample(s) valid", checks.len());
    Ok(())
}
