use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use salvit::geom::{
    augment_layout, backproject_tangent_to_erp, build_forward_grid, build_inverse_grid, project_erp_to_tangent,
    TangentLayout, WeightMode,
};
use salvit::io::{
    self, clip_windows, read_frame, read_pfm, read_pfm_planar, write_heatmap, write_pfm, write_pfm_planar, ClipData,
    Manifest,
};
use salvit::metrics::{self, evaluate_batch, FrameInput};
use salvit::model::{attention_pair_count, late_fuse, AttentionScheme, ModelConfig, SalVit, TangentSet};
use salvit::raster::ErpImage;
use salvit::synth::{generate_synthetic_clip, write_dataset, SyntheticSceneSpec};
use salvit::tensor::Tensor;
use salvit::train::{build_samples, Sample, TrainError, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::UsageError;

const CHECKPOINT: &str = "model.ckpt";
const LAYOUT: &str = "layout.json";

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    require(path, "manifest")?;
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn build_set(model: &SalVit, cfg: &RunConfig, layout: &TangentLayout, h: usize, w: usize) -> Result<TangentSet> {
    Ok(match cfg.grid_cache()? {
        Some(cache) => TangentSet::with_cache(layout, &model.config, h, w, &cache)?,
        None => model.tangent_set(layout, h, w)?,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_map(dir: &Path, stem: &str, map: &ErpImage) -> Result<()> {
    write_pfm(&dir.join(format!("{stem}.pfm")), map)?;
    write_heatmap(&dir.join(format!("{stem}.png")), map)?;
    Ok(())
}

fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub sources: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let m = write_dataset(&a.out, a.clips, a.frames, a.height, 2 * a.height, a.sources, a.seed)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} clips to {}", m.clips.len(), a.out.join("manifest.json").display());
    Ok(())
}

// ---------------------------------------------------------------- project

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// ERP image (png, pfm or pgm).
    #[arg(long)]
    pub image: PathBuf,
    /// Directory for `patch_NN.pfm`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn project(cfg: &RunConfig, a: &ProjectArgs) -> Result<()> {
    let layout = cfg.tangent_layout()?;
    require(&a.image, "image")?;
    let img = read_frame(&a.image)?;
    let grid = build_forward_grid(&layout, img.height(), img.width())?;
    let stack = project_erp_to_tangent(&img, &grid)?;
    let &[t, c, p, _] = stack.shape() else { unreachable!() };
    fs::create_dir_all(&a.out)?;
    for k in 0..t {
        let data = &stack.data()[k * c * p * p..(k + 1) * c * p * p];
        write_pfm_planar(&a.out.join(format!("patch_{k:02}.pfm")), c, p, p, data)?;
    }
    let cov = salvit::geom::coverage_scan(&layout, img.height(), img.width())?;
    println!(
        "projected {}x{} onto {t} planes of {p}x{p}; coverage {:.4}% ({}/{} pixels), max overlap {}",
        img.height(),
        img.width(),
        100.0 * cov.fraction(),
        cov.covered,
        cov.total,
        cov.max_overlap
    );
    Ok(())
}

// ---------------------------------------------------------------- backproject

#[derive(Args, Debug)]
pub struct BackprojectArgs {
    /// Directory of `patch_NN.pfm` files.
    #[arg(long)]
    pub patches: PathBuf,
    /// Output ERP (pfm, png or pgm).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub height: usize,
    /// Image to compare against; prints PSNR with peak 1.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

pub fn backproject(cfg: &RunConfig, a: &BackprojectArgs) -> Result<()> {
    let layout = cfg.tangent_layout()?;
    require(&a.patches, "patch directory")?;
    let (h, w) = (a.height, 2 * a.height);
    let mut stack = Vec::new();
    let mut dims = None;
    for k in 0..layout.planes() {
        let path = a.patches.join(format!("patch_{k:02}.pfm"));
        require(&path, "patch")?;
        let (c, ph, pw, data) = read_pfm_planar(&path)?;
        if ph != pw || dims.is_some_and(|d| d != (c, ph)) {
            bail!("patch {} is {c}x{ph}x{pw}, inconsistent with the others", path.display());
        }
        dims = Some((c, ph));
        stack.extend(data);
    }
    let (c, p) = dims.context("layout has no planes")?;
    let stack = Tensor::new(vec![layout.planes(), c, p, p], stack)?;
    let (inv, _) = build_inverse_grid(&layout.with_patch(p)?, h, w)?;
    let erp = backproject_tangent_to_erp(&stack, &inv, &inv.weights(WeightMode::Normalized))?;
    io::write_frame(&a.out, &erp)?;
    let cov = inv.coverage();
    print!("coverage {:.4}% ({}/{} pixels)", 100.0 * cov.fraction(), cov.covered, cov.total);
    if let Some(r) = &a.reference {
        require(r, "reference image")?;
        let reference = read_frame(r)?;
        if reference.data().len() != erp.data().len() {
            bail!("reference {} does not match {c}x{h}x{w}", r.display());
        }
        print!("; psnr {:.2} dB", psnr(erp.data(), reference.data()));
    }
    println!();
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the checkpoint, loss log and report.
    #[arg(long)]
    pub out: PathBuf,
    /// Add the augmented tangent set and the consistency term.
    #[arg(long)]
    pub vac: bool,
    /// Repeat the first batch for this many steps instead of epochs.
    #[arg(long, value_name = "STEPS")]
    pub overfit: Option<usize>,
}

#[derive(Serialize)]
struct TrainReport {
    mode: &'static str,
    steps: usize,
    train_samples: usize,
    val_samples: usize,
    initial_supervised: f64,
    final_supervised: f64,
    epochs_run: Option<usize>,
    best_epoch: Option<usize>,
    best_val_kld: Option<f64>,
    stopped_early: Option<bool>,
    val_history: Vec<f64>,
    diverged_at: Option<usize>,
}

fn load_clips(m: &Manifest) -> Result<Vec<ClipData>> {
    let clips: Vec<ClipData> = m.clips.iter().map(|c| m.load_clip(c)).collect::<std::result::Result<_, _>>()?;
    let dims = clips.first().context("manifest lists no clips")?.dims();
    if let Some(c) = clips.iter().find(|c| c.dims() != dims) {
        bail!("clip {} is {:?}, expected {dims:?}", c.name, c.dims());
    }
    Ok(clips)
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if a.vac {
        cfg.train.vac.enabled = true;
    }
    let layout = cfg.tangent_layout()?;
    let manifest = load_manifest(&a.manifest)?;
    let clips = load_clips(&manifest)?;
    let (h, w) = clips[0].dims();
    let mut model = SalVit::new(cfg.model.clone())?;
    let set = build_set(&model, &cfg, &layout, h, w)?;
    let aug = if cfg.train.vac.enabled {
        let l = augment_layout(&layout, cfg.train.augmentation)?;
        Some(build_set(&model, &cfg, &l, h, w)?)
    } else {
        None
    };
    let n_val = if clips.len() > cfg.val_clips { cfg.val_clips } else { 0 };
    let (train_clips, val_clips) = clips.split_at(clips.len() - n_val);
    let stride = cfg.train.window_stride;
    let train_s = build_samples(&model, train_clips, stride, &set, aug.as_ref())?;
    let val_s = build_samples(&model, val_clips, stride, &set, None)?;
    fs::create_dir_all(&a.out)?;
    let started = Instant::now();

    let mut trainer = Trainer::new(&mut model, cfg.train.clone(), &set, aug.as_ref())?;
    let mut report = TrainReport {
        mode: if a.overfit.is_some() { "overfit" } else { "fit" },
        steps: 0,
        train_samples: train_s.len(),
        val_samples: val_s.len(),
        initial_supervised: f64::NAN,
        final_supervised: f64::NAN,
        epochs_run: None,
        best_epoch: None,
        best_val_kld: None,
        stopped_early: None,
        val_history: Vec::new(),
        diverged_at: None,
    };
    let outcome = match a.overfit {
        Some(steps) => {
            let n = cfg.train.batch_size.clamp(1, train_s.len().max(1));
            let batch: Vec<&Sample> = train_s.iter().take(n).collect();
            (0..steps).try_for_each(|_| trainer.step(&batch, 0).map(drop))
        }
        None => trainer.fit(&train_s, &val_s).map(|r| {
            report.epochs_run = Some(r.epochs_run);
            report.best_epoch = Some(r.best_epoch);
            report.best_val_kld = Some(r.best_val_kld);
            report.stopped_early = Some(r.stopped_early);
            report.val_history = r.val_history;
        }),
    };
    report.steps = trainer.steps_taken();
    if let (Some(first), Some(last)) = (trainer.log().first(), trainer.log().last()) {
        report.initial_supervised = first.supervised;
        report.final_supervised = last.supervised;
    }
    if let Err(TrainError::Diverged { step }) = &outcome {
        report.diverged_at = Some(*step);
    }
    let log_file = fs::File::create(a.out.join("loss.csv"))?;
    trainer.write_log_csv(std::io::BufWriter::new(log_file))?;
    drop(trainer);

    model.save(&a.out.join(CHECKPOINT))?;
    write_json(&a.out.join(LAYOUT), &layout)?;
    write_json(&a.out.join("train.json"), &report)?;
    log::info!("trained {} steps in {:.2}s", report.steps, started.elapsed().as_secs_f64());
    outcome.with_context(|| format!("checkpoint of the last finite step saved to {}", a.out.join(CHECKPOINT).display()))?;
    println!(
        "{} steps; supervised loss {:.6} -> {:.6}; checkpoint {}",
        report.steps,
        report.initial_supervised,
        report.final_supervised,
        a.out.join(CHECKPOINT).display()
    );
    Ok(())
}

// ---------------------------------------------------------------- predict

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint written by `train`; `layout.json` beside it is used
    /// unless `--layout` is given.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory: `<clip>/<frame>.pfm` plus a PNG heatmap each.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these clips.
    #[arg(long)]
    pub clip: Vec<String>,
}

#[derive(Serialize)]
struct PredictReport {
    clips: usize,
    frames: usize,
    planes: usize,
    tangent_sets_constructed: u64,
    augmented_sets_constructed: u64,
    attention_pairs_per_forward: u64,
}

fn predict_clip(model: &SalVit, set: &TangentSet, clip: &ClipData, out: &Path) -> Result<(usize, u64)> {
    let dir = out.join(&clip.name);
    fs::create_dir_all(&dir)?;
    let mut pairs = 0;
    let windows = clip_windows(clip.len(), model.config.frames, 1)?;
    for r in &windows {
        let pred = model.predict(&clip.frames[r.clone()], set)?;
        pairs = pred.pairs;
        write_map(&dir, &format!("{:04}", r.end - 1), &pred.erp)?;
    }
    Ok((windows.len(), pairs))
}

pub fn predict(cfg: &RunConfig, a: &PredictArgs, threads: usize) -> Result<()> {
    require(&a.checkpoint, "checkpoint")?;
    let model = SalVit::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut run = cfg.clone();
    run.model = model.config.clone();
    let sibling = a.checkpoint.with_file_name(LAYOUT);
    if run.layout.file.is_none() && sibling.exists() {
        run.layout.file = Some(sibling);
    }
    let layout = run.tangent_layout()?;
    let manifest = load_manifest(&a.manifest)?;
    for name in &a.clip {
        if manifest.clip(name).is_none() {
            return Err(UsageError(format!("clip {name:?} not in {}", a.manifest.display())).into());
        }
    }
    let wanted: Vec<_> = manifest
        .clips
        .iter()
        .filter(|c| a.clip.is_empty() || a.clip.contains(&c.name))
        .collect();
    let clips: Vec<ClipData> = wanted.iter().map(|c| manifest.load_clip(c)).collect::<std::result::Result<_, _>>()?;
    let (h, w) = clips.first().context("no clips to predict")?.dims();
    if let Some(c) = clips.iter().find(|c| c.dims() != (h, w)) {
        bail!("clip {} is {:?}, expected {:?}", c.name, c.dims(), (h, w));
    }

    let started = Instant::now();
    let before = TangentSet::constructed();
    let set = build_set(&model, &run, &layout, h, w)?;
    let built = TangentSet::constructed() - before;
    let workers = threads.clamp(1, clips.len());
    let per = clips.len().div_ceil(workers);
    let results: Vec<(usize, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(per)
            .map(|part| {
                let (model, set, out) = (&model, &set, &a.out);
                s.spawn(move || part.iter().map(|c| predict_clip(model, set, c, out)).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;
    let report = PredictReport {
        clips: clips.len(),
        frames: results.iter().map(|r| r.0).sum(),
        planes: layout.planes(),
        tangent_sets_constructed: built,
        augmented_sets_constructed: 0,
        attention_pairs_per_forward: results.first().map_or(0, |r| r.1),
    };
    write_json(&a.out.join("predict.json"), &report)?;
    log::info!("predicted {} frames in {:.3}s", report.frames, started.elapsed().as_secs_f64());
    println!(
        "predicted {} frames of {} clips; tangent sets constructed: {}",
        report.frames, report.clips, report.tangent_sets_constructed
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `predict` or `fuse`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Metric CSV: one row per frame and a final mean row.
    #[arg(long)]
    pub out: PathBuf,
}

/// `(clip, frame index, path)` for every `NNNN.pfm` under `dir/<clip>/`.
fn prediction_files(dir: &Path) -> Result<Vec<(String, usize, PathBuf)>> {
    require(dir, "prediction directory")?;
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let clip = entry.file_name().to_string_lossy().into_owned();
        for f in fs::read_dir(entry.path())? {
            let path = f?.path();
            if path.extension().is_some_and(|e| e == "pfm") {
                if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                    out.push((clip.clone(), idx, path));
                }
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no predictions under {}", dir.display());
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let files = prediction_files(&a.predictions)?;
    let mut maps = Vec::with_capacity(files.len());
    for (clip, idx, path) in &files {
        let cm = manifest
            .clip(clip)
            .with_context(|| format!("prediction clip {clip:?} is not in the manifest"))?;
        if *idx >= cm.frames.len() {
            bail!("{} refers to frame {idx} but clip {clip} has {}", path.display(), cm.frames.len());
        }
        let pred = read_pfm(path)?;
        let density = read_frame(&manifest.resolve(&cm.density[*idx]))?;
        let fix = read_frame(&manifest.resolve(&cm.fixations[*idx]))?;
        if pred.data().len() != density.channel(0).len() {
            bail!("{} does not match the ground-truth size", path.display());
        }
        maps.push((format!("{clip}/{idx:04}"), pred, density, fix));
    }
    let inputs: Vec<FrameInput<'_>> = maps
        .iter()
        .map(|(id, p, d, f)| FrameInput {
            frame_id: id.clone(),
            prediction: p.channel(0),
            density: d.channel(0),
            fixations: f.channel(0),
        })
        .collect();
    let report = evaluate_batch(&inputs, None)?;
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    report.write_csv(std::io::BufWriter::new(fs::File::create(&a.out)?))?;
    for id in &report.degenerate_nss {
        log::warn!("{id}: constant prediction, NSS set to 0");
    }
    let m = &report.mean;
    println!(
        "{} frames: nss {:.4} kld {:.4} cc {:.4} sim {:.4}",
        report.frames.len(),
        m.nss,
        m.kld,
        m.cc,
        m.sim
    );
    Ok(())
}

// ---------------------------------------------------------------- fuse

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub first: PathBuf,
    #[arg(long)]
    pub second: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth; logs the KLD change of every fused frame.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let started = Instant::now();
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let files = prediction_files(&a.first)?;
    require(&a.second, "prediction directory")?;
    let mut log = manifest.as_ref().map(|_| {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame_id", "kld_first", "kld_fused", "delta"]).expect("in-memory write");
        w
    });
    for (clip, idx, path) in &files {
        let stem = format!("{idx:04}");
        let other = a.second.join(clip).join(format!("{stem}.pfm"));
        require(&other, "matching prediction")?;
        let p = read_pfm(path)?;
        let q = read_pfm(&other)?;
        if (p.channels(), p.height(), p.width()) != (q.channels(), q.height(), q.width()) {
            bail!(
                "{} is {}x{} but {} is {}x{}",
                path.display(),
                p.height(),
                p.width(),
                other.display(),
                q.height(),
                q.width()
            );
        }
        let fused = late_fuse(p.data(), q.data())?;
        let fused = ErpImage::new(1, p.height(), p.width(), fused)?;
        let dir = a.out.join(clip);
        fs::create_dir_all(&dir)?;
        write_map(&dir, &stem, &fused)?;
        if let (Some(m), Some(w)) = (&manifest, log.as_mut()) {
            let cm = m.clip(clip).with_context(|| format!("clip {clip:?} is not in the manifest"))?;
            let density = read_frame(&m.resolve(&cm.density[*idx]))?;
            let before = metrics::kld(p.data(), density.channel(0))?;
            let after = metrics::kld(fused.data(), density.channel(0))?;
            let id = format!("{clip}/{stem}");
            w.write_record([id, before.to_string(), after.to_string(), (after - before).to_string()])?;
        }
    }
    if let Some(w) = log {
        let bytes = w.into_inner().context("flushing fuse log")?;
        io::write_atomic(&a.out.join("fuse.csv"), &bytes)?;
    }
    log::info!("fused {} frames in {:.3}s", files.len(), started.elapsed().as_secs_f64());
    println!("fused {} frames into {}", files.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub planes: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// ERP height of the random clip.
    #[arg(long, default_value_t = 32)]
    pub height: usize,
}

pub fn bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    if a.planes == 0 || a.frames == 0 {
        return Err(UsageError("bench needs at least one frame and one plane".into()).into());
    }
    let base = ModelConfig {
        frames: a.frames,
        ..cfg.model.clone()
    };
    let layout = salvit::geom::make_layout(cfg.layout.kind, a.planes, cfg.layout.fov_deg, base.patch_px)
        .map_err(|e| UsageError(format!("layout: {e}")))?;
    let clip = generate_synthetic_clip(&SyntheticSceneSpec::random(base.seed, 2), "bench", a.frames, a.height, 2 * a.height)?;
    println!("F={} T={} depth={}", a.frames, a.planes, base.depth);
    println!("{:<10} {:>12} {:>14} {:>12}", "scheme", "pairs/block", "pairs/forward", "ms/forward");
    for scheme in AttentionScheme::ALL {
        let model = SalVit::new(ModelConfig { scheme, ..base.clone() })?;
        let set = model.tangent_set(&layout, a.height, 2 * a.height)?;
        let enc = model.encode_clip(&clip.frames, &set)?;
        let mut pairs = 0;
        let t0 = Instant::now();
        for _ in 0..a.repeats.max(1) {
            pairs = model.predict_encoded(&enc, &set)?.pairs;
        }
        let ms = 1e3 * t0.elapsed().as_secs_f64() / a.repeats.max(1) as f64;
        println!(
            "{:<10} {:>12} {:>14} {:>12.2}",
            scheme.name(),
            attention_pair_count(a.frames, a.planes, scheme),
            pairs,
            ms
        );
    }
    Ok(())
}
