use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use gaze_core::anchors::{AnchorRegistry, AnchorSelector};
use gaze_core::corrnet::CorrNet;
use gaze_core::data::io::{read_events, read_pgm};
use gaze_core::data::{generate_synthetic, load_manifest, EventStream, Frame, Split};
use gaze_core::diffusion::verify::run_suite;
use gaze_core::diffusion::{Denoiser, LatentStats};
use gaze_core::distill::DistillConfig;
use gaze_core::geom::continuous::ContinuousHead;
use gaze_core::pipeline::artifacts::{read_json, write_json};
use gaze_core::pipeline::heatmap::dump_attention_heatmap;
use gaze_core::pipeline::{evaluate, stages, ArtifactLayout, Dataset, Predictor, Router, RunConfig};
use gaze_core::tokenizer::TokenizedState;
use gaze_core::GazeError;
use serde::Serialize;
use serde_json::json;

pub const KIND_EXPERT: &str = "expert";
pub const KIND_STUDENT: &str = "student";
pub const KIND_BASELINE: &str = "baseline";

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(layout: &ArtifactLayout) -> anyhow::Result<Self> {
        fs::create_dir_all(&layout.root)
            .with_context(|| format!("creating {}", layout.root.display()))?;
        let path = layout.lock();
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map(|_: File| Self { path: path.clone() })
            .with_context(|| {
                format!(
                    "{} is locked by another command; delete {} if no command is running",
                    layout.root.display(),
                    path.display()
                )
            })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub layout: ArtifactLayout,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        let layout = ArtifactLayout::new(&cfg.output_dir);
        Self { cfg, layout }
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        let path = &self.cfg.data.manifest;
        if !path.is_file() {
            return Err(GazeError::MissingArtifact(path.clone()).into());
        }
        Ok(Dataset::load(path, &self.cfg.tokenizer)?)
    }

    fn registry(&self) -> anyhow::Result<AnchorRegistry> {
        let p = self.layout.registry();
        ArtifactLayout::require([p.as_path()])?;
        Ok(AnchorRegistry::load(&p)?)
    }

    fn experts(&self, n: usize) -> anyhow::Result<Vec<CorrNet>> {
        let paths = self.layout.experts(n);
        ArtifactLayout::require(paths.iter().map(PathBuf::as_path))?;
        Ok(paths
            .iter()
            .map(|p| CorrNet::load(p, KIND_EXPERT))
            .collect::<Result<_, _>>()?)
    }

    fn selector(&self) -> anyhow::Result<AnchorSelector> {
        let p = self.layout.selector();
        ArtifactLayout::require([p.as_path()])?;
        Ok(AnchorSelector::load(&p)?)
    }

    /// Learned routing, or the single anchor when there is only one.
    fn router(&self, registry: &AnchorRegistry) -> anyhow::Result<Router> {
        if registry.partition.len() == 1 {
            Ok(Router::Fixed(0))
        } else {
            Ok(Router::Selector(self.selector()?))
        }
    }

    fn report(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let path = self.layout.reports().join(format!("{name}.json"));
        write_json(&path, value)?;
        println!("{}", serde_json::to_string_pretty(value)?);
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }
}

pub fn generate_data(ctx: &Ctx, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = &ctx.cfg;
    let dir = out.unwrap_or_else(|| {
        cfg.data
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let mut scene = cfg.data.scene.clone();
    scene.seed = cfg.seed;
    let t = Instant::now();
    let m = generate_synthetic(&scene, &cfg.data.screen, cfg.data.grid, cfg.data.repeats, &dir)?;
    ctx.report(
        "generate_data",
        &json!({
            "manifest": dir.join("manifest.json"),
            "samples": m.samples.len(),
            "grid": m.grid,
            "train": m.indices(Split::Train).len(),
            "val": m.indices(Split::Val).len(),
            "test": m.indices(Split::Test).len(),
            "seed": cfg.seed,
            "seconds": t.elapsed().as_secs_f64(),
        }),
    )
}

pub fn train_expert(ctx: &Ctx, region: Option<usize>) -> anyhow::Result<()> {
    let ds = ctx.dataset()?;
    let registry = stages::build_registry(&ctx.cfg, &ds)?;
    registry.save(&ctx.layout.registry())?;
    let regions: Vec<usize> = match region {
        Some(r) if r >= registry.partition.len() => {
            return Err(GazeError::Config(format!(
                "region {r} out of range ({} regions)",
                registry.partition.len()
            ))
            .into())
        }
        Some(r) => vec![r],
        None => (0..registry.partition.len()).collect(),
    };
    let mut summary = Vec::new();
    for r in regions {
        let res = stages::train_expert(&ctx.cfg, &ds, &registry, r)?;
        let epochs = res.log.epochs.len();
        res.net.save(&ctx.layout.expert(r), KIND_EXPERT, ctx.seed(), epochs)?;
        write_json(&ctx.layout.logs().join(format!("expert_{r}.json")), &res.log)?;
        log::info!("expert {r}: val accuracy {:.3}", res.val_accuracy);
        summary.push(json!({
            "region": r,
            "cells": registry.partition.regions[r].cells.len(),
            "anchor": registry.partition.regions[r].anchor,
            "val_accuracy": res.val_accuracy,
            "final_loss": res.log.final_loss(),
        }));
    }
    ctx.report("train_expert", &json!({ "experts": summary }))
}

pub fn train_selector(ctx: &Ctx) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let ds = ctx.dataset()?;
    let (sel, log) = stages::train_selector(&ctx.cfg, &ds, &registry)?;
    sel.save(&ctx.layout.selector(), &ctx.cfg.tokenizer, ctx.seed(), log.epochs.len())?;
    write_json(&ctx.layout.logs().join("selector.json"), &log)?;
    ctx.report(
        "train_selector",
        &json!({ "regions": sel.regions, "val_accuracy": log.final_val_accuracy() }),
    )
}

pub fn train_baseline(ctx: &Ctx) -> anyhow::Result<()> {
    let ds = ctx.dataset()?;
    let res = stages::train_baseline(&ctx.cfg, &ds)?;
    res.net
        .save(&ctx.layout.baseline(), KIND_BASELINE, ctx.seed(), res.log.epochs.len())?;
    write_json(&ctx.layout.logs().join("baseline.json"), &res.log)?;
    ctx.report(
        "train_baseline",
        &json!({ "val_accuracy": res.log.final_val_accuracy(), "final_loss": res.log.final_loss() }),
    )
}

pub fn train_denoiser(ctx: &Ctx) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let experts = ctx.experts(registry.partition.len())?;
    let ds = ctx.dataset()?;
    let res = stages::train_denoiser_stage(&ctx.cfg, &ds, &experts, &registry)?;
    write_json(&ctx.layout.latent_stats(), &res.stats)?;
    res.denoiser.save(
        &ctx.layout.denoiser(),
        &ctx.cfg.diffusion.schedule,
        ctx.seed(),
        res.log.epochs.len(),
    )?;
    write_json(&ctx.layout.logs().join("denoiser.json"), &res.log)?;
    let last = res.log.epochs.last();
    ctx.report(
        "train_denoiser",
        &json!({
            "final_loss": last.map(|e| e.loss),
            "final_val_loss": last.map(|e| e.val_loss),
        }),
    )
}

pub fn distill(ctx: &Ctx, dc: &DistillConfig) -> anyhow::Result<()> {
    dc.validate()?;
    let registry = ctx.registry()?;
    let n = registry.partition.len();
    let experts = ctx.experts(n)?;
    let denoiser = if dc.lambda > 0.0 {
        let p = ctx.layout.denoiser();
        ArtifactLayout::require([p.as_path()])?;
        let (den, schedule) = Denoiser::load(&p)?;
        if schedule != ctx.cfg.diffusion.schedule {
            log::warn!("denoiser was trained with a different schedule; using the checkpoint's");
        }
        Some((den, schedule))
    } else {
        None
    };
    let ds = ctx.dataset()?;
    let stats_path = ctx.layout.latent_stats();
    let stats: LatentStats = if stats_path.is_file() {
        read_json(&stats_path)?
    } else if denoiser.is_none() {
        let raw = stages::teacher_latents(&experts, &registry, &ds, &ds.split(Split::Train))?;
        LatentStats::fit(&raw)?
    } else {
        return Err(GazeError::MissingArtifact(stats_path).into());
    };
    let mut cfg = ctx.cfg.clone();
    if let Some((_, s)) = &denoiser {
        cfg.diffusion.schedule = s.clone();
    }
    let router = if ctx.layout.selector().is_file() {
        Router::Selector(ctx.selector()?)
    } else {
        log::warn!("no selector checkpoint; validating with ground-truth routing");
        Router::Oracle(registry.partition.clone())
    };
    let teachers = stages::teacher_bank(&cfg, experts, registry, denoiser.map(|d| d.0), stats)?;
    let (student, log) = stages::distill_student(&cfg, dc, &ds, &teachers, None, &router)?;
    student.save(&ctx.layout.student(), KIND_STUDENT, ctx.seed(), log.epochs.len())?;
    log.write_csv(&ctx.layout.logs().join("distill.csv"))?;
    let last = log.epochs.last();
    ctx.report(
        "distill",
        &json!({
            "alpha": dc.alpha,
            "beta": dc.beta,
            "lambda": dc.lambda,
            "samples": dc.samples,
            "val_accuracy": last.map(|e| e.val_acc),
            "val_mae_deg": last.map(|e| e.val_mae),
        }),
    )
}

fn student_for_continuous(ctx: &Ctx) -> PathBuf {
    ctx.layout.root.join("student_continuous.json")
}

pub fn finetune_continuous(ctx: &Ctx, unfreeze: bool) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let sp = ctx.layout.student();
    ArtifactLayout::require([sp.as_path()])?;
    let mut student = CorrNet::load(&sp, KIND_STUDENT)?;
    let ds = ctx.dataset()?;
    let mut cfg = ctx.cfg.clone();
    cfg.continuous.unfreeze = unfreeze;
    let (head, log) = stages::train_continuous(&cfg, &ds, &mut student, &registry)?;
    let epochs = log.epochs.len();
    head.save(&ctx.layout.continuous_head(), ctx.seed(), epochs)?;
    let cont = student_for_continuous(ctx);
    if unfreeze {
        student.save(&cont, KIND_STUDENT, ctx.seed(), epochs)?;
    } else if cont.is_file() {
        fs::remove_file(&cont).with_context(|| format!("removing stale {}", cont.display()))?;
    }
    write_json(&ctx.layout.logs().join("continuous.json"), &log)?;
    ctx.report(
        "finetune_continuous",
        &json!({ "unfreeze": unfreeze, "final_loss": log.epochs.last().map(|e| e.loss) }),
    )
}

/// The deployed predictor: student (or baseline), anchors, routing and
/// optionally the continuous head. Never touches the denoiser.
fn load_predictor(ctx: &Ctx, model: ModelKind, continuous: bool) -> anyhow::Result<(Predictor, AnchorRegistry)> {
    let (net, registry, router) = match model {
        ModelKind::Student => {
            let registry = ctx.registry()?;
            let mut path = ctx.layout.student();
            if continuous && student_for_continuous(ctx).is_file() {
                path = student_for_continuous(ctx);
            }
            ArtifactLayout::require([path.as_path()])?;
            let net = CorrNet::load(&path, KIND_STUDENT)?;
            let router = ctx.router(&registry)?;
            (net, registry, router)
        }
        ModelKind::Baseline => {
            let path = ctx.layout.baseline();
            ArtifactLayout::require([path.as_path()])?;
            let ds = ctx.dataset()?;
            let registry = AnchorRegistry::from_samples(
                gaze_core::anchors::partition_grid(ds.grid(), 1)?,
                ds.train_pairs(),
            )?;
            (CorrNet::load(&path, KIND_BASELINE)?, registry, Router::Fixed(0))
        }
    };
    let grid = registry.partition.grid;
    let screen = ctx.cfg.data.screen.clone();
    let mut p = Predictor::new(net, router, registry.states()?, grid, screen)?;
    if continuous {
        let hp = ctx.layout.continuous_head();
        ArtifactLayout::require([hp.as_path()])?;
        p = p.with_head(ContinuousHead::load(&hp)?);
    }
    Ok((p, registry))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Student,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

pub fn evaluate_cmd(ctx: &Ctx, model: ModelKind, split: SplitArg, continuous: bool) -> anyhow::Result<()> {
    let (mut predictor, registry) = load_predictor(ctx, model, continuous)?;
    let ds = ctx.dataset()?;
    if ds.grid() != predictor.grid {
        return Err(GazeError::Config(format!(
            "manifest grid {} differs from the model's {}",
            ds.grid(),
            predictor.grid
        ))
        .into());
    }
    predictor.screen = ds.manifest.screen.clone();
    let indices = ds.split(split.into());
    let report = evaluate(&predictor, &ds, &indices, &registry.partition)?;
    let name = format!(
        "eval_{}_{}",
        format!("{model:?}").to_lowercase(),
        format!("{split:?}").to_lowercase()
    );
    ctx.report(&name, &report)
}

#[derive(Serialize)]
pub struct InferOutput {
    pub prediction: gaze_core::pipeline::Prediction,
    pub latency_us: u128,
}

pub fn load_state(ctx: &Ctx, frame: &Path, events: &Path, window: Option<[u64; 2]>) -> anyhow::Result<TokenizedState> {
    let intensity = read_pgm(frame)?;
    let (h, w) = intensity.dim();
    let ev = read_events(events)?;
    let [t0, t1] = window.unwrap_or([0, ev.last().map_or(1, |e| e.t + 1)]);
    let stream = EventStream::new(ev, w, h, t0, t1)?;
    let frame = Frame::new(intensity, t1.saturating_sub(1))?;
    Ok(TokenizedState::new(&frame, &stream, &ctx.cfg.tokenizer)?)
}

pub fn infer(
    ctx: &Ctx,
    frame: &Path,
    events: &Path,
    window: Option<[u64; 2]>,
    continuous: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let (predictor, _) = load_predictor(ctx, ModelKind::Student, continuous)?;
    let start = Instant::now();
    let state = load_state(ctx, frame, events, window)?;
    let prediction = predictor.predict(&state, None)?;
    let latency_us = start.elapsed().as_micros();
    let output = InferOutput {
        prediction,
        latency_us,
    };
    if let Some(p) = out {
        write_json(p, &output)?;
    }
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

pub fn diffusion_verify(ctx: &Ctx, samples: usize) -> anyhow::Result<bool> {
    let s = ctx.cfg.diffusion.schedule.build()?;
    let t = Instant::now();
    let report = run_suite(&s, samples, ctx.seed())?;
    let pass = report.pass;
    ctx.report(
        "diffusion_verify",
        &json!({ "report": report, "seconds": t.elapsed().as_secs_f64() }),
    )?;
    Ok(pass)
}

pub fn attention_map(ctx: &Ctx, sample: Option<usize>, input: Option<(PathBuf, PathBuf)>, out: &Path) -> anyhow::Result<()> {
    let (predictor, _) = load_predictor(ctx, ModelKind::Student, false)?;
    let state = match (sample, input) {
        (Some(k), _) => {
            let m = load_manifest(&ctx.cfg.data.manifest)?;
            if k >= m.samples.len() {
                return Err(GazeError::Config(format!("sample {k} out of range ({})", m.samples.len())).into());
            }
            let s = m.load_sample(k)?;
            TokenizedState::new(&s.frame, &s.events, &ctx.cfg.tokenizer)?
        }
        (None, Some((f, e))) => load_state(ctx, &f, &e, None)?,
        (None, None) => {
            return Err(GazeError::Config("attention-map needs --sample or --frame/--events".into()).into())
        }
    };
    let region = predictor.router.route(&state, None)?;
    let out_ = predictor.net.forward(&predictor.anchors[region], &state)?;
    dump_attention_heatmap(&out_.attention, &predictor.net.config.tokenizer, out)?;
    println!("{}", json!({ "region": region, "image": out }));
    Ok(())
}
