//! Training stages in pipeline order. Every stage draws its randomness from
//! the run seed and a fixed per-stage tag.

use super::dataset::Dataset;
use super::eval::{evaluate, Predictor, Router};
use super::RunConfig;
use crate::anchors::{partition_grid, AnchorRegistry, AnchorSelector, Region};
use crate::corrnet::{classification_accuracy, train_stage1, CorrNet, Example, TrainingLog};
use crate::data::Split;
use crate::diffusion::{train_denoiser, Denoiser, DenoiserLog, LatentStats};
use crate::distill::{train_stage2, DistillConfig, DistillLog, ReconstructionBank, Stage2Data, TeacherBank};
use crate::error::{GazeError, Result};
use crate::geom::continuous::{finetune_continuous, ContinuousHead, ContinuousLog, CoordExample};
use crate::nn::Mat;
use crate::par;
use crate::rng::stream_id;

const TAG_EXPERT: u64 = 0x100;
const TAG_SELECTOR: u64 = 0x200;
const TAG_DENOISER: u64 = 0x300;
const TAG_STUDENT: u64 = 0x400;
const TAG_BANK: u64 = 0x500;
const TAG_BASELINE: u64 = 0x600;
const TAG_CONTINUOUS: u64 = 0x700;

pub fn stage_seed(seed: u64, tag: u64) -> u64 {
    stream_id(tag, seed)
}

pub fn build_registry(cfg: &RunConfig, ds: &Dataset) -> Result<AnchorRegistry> {
    check_grid(cfg, ds)?;
    let partition = partition_grid(ds.grid(), cfg.anchors.count)?;
    AnchorRegistry::from_samples(partition, ds.train_pairs())
}

fn check_grid(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.grid() != cfg.data.grid {
        return Err(GazeError::Config(format!(
            "manifest grid {} differs from data.grid {}",
            ds.grid(),
            cfg.data.grid
        )));
    }
    Ok(())
}

/// Samples of `split` whose cell belongs to `region`, labelled by the
/// cell's position in the region and paired with anchor 0.
pub fn region_examples(ds: &Dataset, region: &Region, split: Split) -> Vec<Example> {
    ds.split(split)
        .into_iter()
        .filter_map(|k| {
            region.local_index(ds.cell(k)).map(|label| Example {
                state: k,
                anchor: 0,
                label,
            })
        })
        .collect()
}

pub struct ExpertResult {
    pub net: CorrNet,
    pub log: TrainingLog,
    /// In-region accuracy on the validation split.
    pub val_accuracy: f64,
}

pub fn train_expert(cfg: &RunConfig, ds: &Dataset, registry: &AnchorRegistry, r: usize) -> Result<ExpertResult> {
    let region = registry
        .partition
        .regions
        .get(r)
        .ok_or_else(|| GazeError::Validation(format!("no region {r}")))?;
    let seed = stage_seed(cfg.seed, TAG_EXPERT + r as u64);
    let mut net = CorrNet::new(cfg.corrnet().with_classes(region.cells.len()), seed)?;
    let anchors = vec![registry.state(r)?.clone()];
    let train = region_examples(ds, region, Split::Train);
    let val = region_examples(ds, region, Split::Val);
    let log = train_stage1(&mut net, &ds.states, &anchors, &train, &val, &cfg.optim.expert, seed)?;
    let val_accuracy = classification_accuracy(&net, &ds.states, &anchors, &val)?;
    Ok(ExpertResult { net, log, val_accuracy })
}

pub fn train_experts(cfg: &RunConfig, ds: &Dataset, registry: &AnchorRegistry) -> Result<Vec<ExpertResult>> {
    (0..registry.partition.len())
        .map(|r| {
            let res = train_expert(cfg, ds, registry, r)?;
            log::info!("expert {r}: validation accuracy {:.3}", res.val_accuracy);
            Ok(res)
        })
        .collect()
}

/// `(sample, primary region)` pairs of a split.
pub fn selector_items(ds: &Dataset, registry: &AnchorRegistry, split: Split) -> Vec<(usize, usize)> {
    ds.split(split)
        .into_iter()
        .map(|k| (k, registry.partition.primary_region(ds.cell(k))))
        .collect()
}

pub fn train_selector(cfg: &RunConfig, ds: &Dataset, registry: &AnchorRegistry) -> Result<(AnchorSelector, TrainingLog)> {
    let seed = stage_seed(cfg.seed, TAG_SELECTOR);
    let mut sel = AnchorSelector::new(
        cfg.anchors.selector.clone(),
        &cfg.tokenizer,
        registry.partition.len(),
        seed,
    )?;
    let train = selector_items(ds, registry, Split::Train);
    let val = selector_items(ds, registry, Split::Val);
    let log = sel.train(&ds.states, &train, &val, &cfg.optim.selector, seed)?;
    Ok((sel, log))
}

/// Raw latents of the routed teacher for each sample in `indices`.
pub fn teacher_latents(
    experts: &[CorrNet],
    registry: &AnchorRegistry,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Vec<Mat>> {
    par::try_map_indexed(indices.len(), |k| {
        let i = indices[k];
        let r = registry.partition.primary_region(ds.cell(i));
        experts[r].forward(registry.state(r)?, &ds.states[i]).map(|o| o.latent)
    })
}

pub struct DenoiserResult {
    pub denoiser: Denoiser,
    pub stats: LatentStats,
    pub log: DenoiserLog,
}

/// Fits whitening statistics on the training-split teacher latents and
/// trains the denoiser on the whitened latents.
pub fn train_denoiser_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    experts: &[CorrNet],
    registry: &AnchorRegistry,
) -> Result<DenoiserResult> {
    let raw_train = teacher_latents(experts, registry, ds, &ds.split(Split::Train))?;
    let raw_val = teacher_latents(experts, registry, ds, &ds.split(Split::Val))?;
    let stats = LatentStats::fit(&raw_train)?;
    let train: Vec<Mat> = raw_train.iter().map(|m| stats.whiten(m)).collect();
    let val: Vec<Mat> = raw_val.iter().map(|m| stats.whiten(m)).collect();
    let schedule = cfg.diffusion.schedule.build()?;
    let seed = stage_seed(cfg.seed, TAG_DENOISER);
    let mut denoiser = Denoiser::new(cfg.diffusion.denoiser.clone(), cfg.tokenizer.dim, seed)?;
    let log = train_denoiser(&mut denoiser, &train, &val, &schedule, &cfg.optim.denoiser, seed)?;
    Ok(DenoiserResult { denoiser, stats, log })
}

pub fn teacher_bank(
    cfg: &RunConfig,
    experts: Vec<CorrNet>,
    registry: AnchorRegistry,
    denoiser: Option<Denoiser>,
    stats: LatentStats,
) -> Result<TeacherBank> {
    let bank = TeacherBank {
        experts,
        registry,
        denoiser,
        schedule: cfg.diffusion.schedule.build()?,
        stats,
    };
    bank.validate()?;
    Ok(bank)
}

/// Reconstruction pools for the training split, in split order, so one
/// pool can be shared by several distillation runs.
pub fn reconstruction_bank(cfg: &RunConfig, ds: &Dataset, teachers: &TeacherBank, size: usize) -> Result<ReconstructionBank> {
    let train = ds.split(Split::Train);
    let states: Vec<_> = train.iter().map(|&k| ds.states[k].clone()).collect();
    let cells: Vec<_> = train.iter().map(|&k| ds.cell(k)).collect();
    let targets = teachers.targets(&states, &cells)?;
    ReconstructionBank::build(teachers, &targets, size, stage_seed(cfg.seed, TAG_BANK))
}

/// Distils the teachers into a fresh full-grid student. Per-epoch
/// validation routes with `router` on the validation split.
pub fn distill_student(
    cfg: &RunConfig,
    distill: &DistillConfig,
    ds: &Dataset,
    teachers: &TeacherBank,
    bank: Option<&ReconstructionBank>,
    router: &Router,
) -> Result<(CorrNet, DistillLog)> {
    check_grid(cfg, ds)?;
    let grid = ds.grid();
    let seed = stage_seed(cfg.seed, TAG_STUDENT);
    let mut student = CorrNet::new(cfg.corrnet().with_classes(grid * grid), seed)?;
    let cells = ds.cells();
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let anchors = teachers.registry.states()?;
    let partition = teachers.registry.partition.clone();
    let data = Stage2Data {
        states: &ds.states,
        cells: &cells,
        train: &train,
        bank,
    };
    let log = train_stage2(&mut student, teachers, &data, distill, &cfg.optim.distill, seed, |net| {
        let p = Predictor::new(net.clone(), router.clone(), anchors.clone(), grid, ds.manifest.screen.clone())?;
        let rep = evaluate(&p, ds, &val, &partition)?;
        Ok((rep.accuracy, rep.mae_deg))
    })?;
    Ok((student, log))
}

pub struct BaselineResult {
    pub net: CorrNet,
    pub registry: AnchorRegistry,
    pub log: TrainingLog,
}

/// Single-anchor full-grid model with the student's architecture, trained
/// directly on the labels.
pub fn train_baseline(cfg: &RunConfig, ds: &Dataset) -> Result<BaselineResult> {
    check_grid(cfg, ds)?;
    let grid = ds.grid();
    let registry = AnchorRegistry::from_samples(partition_grid(grid, 1)?, ds.train_pairs())?;
    let region = &registry.partition.regions[0];
    let seed = stage_seed(cfg.seed, TAG_BASELINE);
    let mut net = CorrNet::new(cfg.corrnet().with_classes(grid * grid), seed)?;
    let anchors = vec![registry.state(0)?.clone()];
    let train = region_examples(ds, region, Split::Train);
    let val = region_examples(ds, region, Split::Val);
    let log = train_stage1(&mut net, &ds.states, &anchors, &train, &val, &cfg.optim.baseline, seed)?;
    Ok(BaselineResult { net, registry, log })
}

/// Regresses normalised screen coordinates from the student's latent; each
/// training sample is paired with its ground-truth region's anchor.
pub fn train_continuous(
    cfg: &RunConfig,
    ds: &Dataset,
    student: &mut CorrNet,
    registry: &AnchorRegistry,
) -> Result<(ContinuousHead, ContinuousLog)> {
    let seed = stage_seed(cfg.seed, TAG_CONTINUOUS);
    let screen = &ds.manifest.screen;
    let (w, h) = (f64::from(screen.w_px), f64::from(screen.h_px));
    let anchors = registry.states()?;
    let examples: Vec<CoordExample> = ds
        .split(Split::Train)
        .into_iter()
        .map(|k| {
            let px = ds.labels[k].screen_px;
            CoordExample {
                anchor: &anchors[registry.partition.primary_region(ds.cell(k))],
                state: &ds.states[k],
                target: [px[0] / w, px[1] / h],
            }
        })
        .collect();
    let mut head = ContinuousHead::new(cfg.tokenizer.dim, cfg.continuous.hidden, seed)?;
    let log = finetune_continuous(student, &mut head, &examples, &cfg.optim.continuous, cfg.continuous.unfreeze, seed)?;
    Ok((head, log))
}
