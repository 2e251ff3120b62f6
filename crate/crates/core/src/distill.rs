//! Second-stage training: one full-grid student learns from the regional
//! experts through hard labels, attention maps and denoised latents.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorRegistry;
use crate::corrnet::CorrNet;
use crate::diffusion::{reverse_sample, Denoiser, LatentStats, NoiseSchedule};
use crate::error::{GazeError, Result};
use crate::nn::{self, Graph, Mat, OptimizerConfig, Var};
use crate::par;
use crate::tokenizer::TokenizedState;

pub const KL_FLOOR: f64 = 1e-8;
const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Reconstructions per training step.
    pub samples: usize,
    /// When set, each sample draws its reconstructions from a fixed pool of
    /// this size built once before training instead of sampling afresh.
    pub bank_size: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 500.0,
            samples: 16,
            bank_size: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(GazeError::Config(format!("loss weight {name} = {w} must be >= 0")));
            }
        }
        if self.samples == 0 {
            return Err(GazeError::Config("reconstruction samples must be >= 1".into()));
        }
        if let Some(r) = self.bank_size {
            if r < self.samples {
                return Err(GazeError::Config(format!(
                    "reconstruction pool {r} is smaller than S = {}",
                    self.samples
                )));
            }
        }
        Ok(())
    }
}

fn check_shapes(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(GazeError::Validation(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean over reconstructions of the mean squared error between the student
/// latent and each reconstruction scaled by `1/√ᾱ_i`.
pub fn distill_feature_loss(student: &Mat, recons: &[Mat], alpha_bar_i: f64) -> Result<f64> {
    if recons.is_empty() {
        return Err(GazeError::Validation("no reconstructions".into()));
    }
    let k = 1.0 / alpha_bar_i.sqrt();
    let mut total = 0.0;
    for r in recons {
        check_shapes(student, r, "feature loss")?;
        total += student
            .iter()
            .zip(r.iter())
            .map(|(x, y)| (x - y * k).powi(2))
            .sum::<f64>()
            / student.len() as f64;
    }
    Ok(total / recons.len() as f64)
}

fn check_stochastic(m: &Mat, what: &str) -> Result<()> {
    for (r, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(GazeError::Validation(format!(
                "{what} row {r} is not a probability distribution"
            )));
        }
    }
    Ok(())
}

/// Row-mean of `KL(T_E row ‖ T_S row)` with a floor inside the logarithm.
pub fn soft_attention_loss(student: &Mat, teacher: &Mat) -> Result<f64> {
    check_shapes(student, teacher, "attention loss")?;
    check_stochastic(student, "student attention")?;
    check_stochastic(teacher, "teacher attention")?;
    let mut total = 0.0;
    for (p, q) in teacher.rows().into_iter().zip(student.rows()) {
        total += p
            .iter()
            .zip(q)
            .map(|(&p, &q)| p * (p.max(KL_FLOOR).ln() - q.max(KL_FLOOR).ln()))
            .sum::<f64>();
    }
    Ok(total / teacher.nrows() as f64)
}

pub fn total_loss(l_e: f64, l_s: f64, l_d: f64, cfg: &DistillConfig) -> f64 {
    cfg.alpha * l_e + cfg.beta * l_s + cfg.lambda * l_d
}

/// Graph form of [`soft_attention_loss`] with the teacher held constant.
pub fn soft_attention_loss_graph(g: &mut Graph<'_>, student: Var, teacher: &Mat) -> Var {
    let rows = teacher.nrows() as f64;
    let entropy_term: f64 = teacher.iter().map(|&p| p * p.max(KL_FLOOR).ln()).sum();
    let lq = g.ln_floor(student, KL_FLOOR);
    let p = g.constant(teacher.clone());
    let cross = g.mul(lq, p);
    let cross = g.sum_all(cross);
    let neg = g.scale(cross, -1.0 / rows);
    g.add_scalar(neg, entropy_term / rows)
}

/// Graph form of [`distill_feature_loss`]; `student` is already whitened.
/// Uses `mean_s ‖x − r_s‖² = ‖x − r̄‖² + mean_s ‖r_s − r̄‖²`.
pub fn feature_loss_graph(g: &mut Graph<'_>, student: Var, recons: &[Mat], alpha_bar_i: f64) -> Result<Var> {
    if recons.is_empty() {
        return Err(GazeError::Validation("no reconstructions".into()));
    }
    let k = 1.0 / alpha_bar_i.sqrt();
    let dim = g.value(student).dim();
    let mut mean = Mat::zeros(dim);
    for r in recons {
        if r.dim() != dim {
            return Err(GazeError::Validation(format!(
                "feature loss: shapes {dim:?} and {:?} differ",
                r.dim()
            )));
        }
        mean.scaled_add(k / recons.len() as f64, r);
    }
    let spread: f64 = recons
        .iter()
        .map(|r| {
            r.iter()
                .zip(mean.iter())
                .map(|(y, m)| (y * k - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (recons.len() * mean.len()) as f64;
    let target = g.constant(mean);
    let diff = g.sub(student, target);
    let sq = g.square(diff);
    let m = g.mean_all(sq);
    Ok(g.add_scalar(m, spread))
}

/// Whitens a latent inside the graph with frozen statistics.
pub fn whiten_graph(g: &mut Graph<'_>, x: Var, stats: &LatentStats) -> Var {
    let d = stats.mean.len();
    let mean = g.constant(Mat::from_shape_vec((1, d), stats.mean.clone()).expect("shape"));
    let inv = g.constant(
        Mat::from_shape_vec((1, d), stats.std.iter().map(|s| 1.0 / s).collect()).expect("shape"),
    );
    let c = g.sub(x, mean);
    g.mul(c, inv)
}

/// Frozen first-stage models used as teachers.
pub struct TeacherBank {
    pub experts: Vec<CorrNet>,
    pub registry: AnchorRegistry,
    pub denoiser: Option<Denoiser>,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
}

/// Teacher outputs for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    pub region: usize,
    /// Whitened latent, i.e. the measurement `X_i`.
    pub latent: Mat,
    pub attention: Mat,
}

impl TeacherBank {
    pub fn validate(&self) -> Result<()> {
        let n = self.registry.partition.len();
        if self.experts.len() != n {
            return Err(GazeError::Validation(format!(
                "{} experts for {n} regions",
                self.experts.len()
            )));
        }
        if !self.registry.is_complete() {
            return Err(GazeError::Validation("anchor registry is incomplete".into()));
        }
        Ok(())
    }

    /// Routes by the ground-truth primary region of `cell` and runs that
    /// expert on the sample paired with the region's anchor.
    pub fn target(&self, state: &TokenizedState, cell: (usize, usize)) -> Result<TeacherTarget> {
        let region = self.registry.partition.primary_region(cell);
        let out = self.experts[region].forward(self.registry.state(region)?, state)?;
        Ok(TeacherTarget {
            region,
            latent: self.stats.whiten(&out.latent),
            attention: out.attention,
        })
    }

    pub fn targets(&self, states: &[TokenizedState], cells: &[(usize, usize)]) -> Result<Vec<TeacherTarget>> {
        par::try_map_indexed(states.len(), |k| self.target(&states[k], cells[k]))
    }

    fn denoiser(&self) -> Result<&Denoiser> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| GazeError::Validation("teacher bank has no denoiser".into()))
    }

    pub fn reconstruct(&self, target: &TeacherTarget, seed: u64, samples: usize) -> Result<Vec<Mat>> {
        reverse_sample(&target.latent, &self.schedule, self.denoiser()?, seed, samples)
    }
}

/// Reconstruction pool per training sample.
pub struct ReconstructionBank {
    pub pools: Vec<Vec<Mat>>,
}

impl ReconstructionBank {
    pub fn build(teachers: &TeacherBank, targets: &[TeacherTarget], size: usize, seed: u64) -> Result<Self> {
        let den = teachers.denoiser()?;
        let pools = targets
            .iter()
            .enumerate()
            .map(|(k, t)| {
                reverse_sample(&t.latent, &teachers.schedule, den, crate::rng::stream_id(k as u64, seed), size)
            })
            .collect::<Result<_>>()?;
        Ok(Self { pools })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub epochs: Vec<DistillEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub l_e: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_mae: f64,
}

impl DistillLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| GazeError::io(path, e))?;
        let mut text = String::from("epoch,L_e,L_s,L_d,total,val_acc,val_MAE\n");
        for e in &self.epochs {
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.l_e, e.l_s, e.l_d, e.total, e.val_acc, e.val_mae
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| GazeError::io(path, e))
    }
}

/// Per-sample loss components and gradient.
pub struct Stage2Terms {
    pub l_e: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Builds the weighted stage-2 objective for one sample.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_graph(
    g: &mut Graph<'_>,
    student: &CorrNet,
    anchor: &TokenizedState,
    state: &TokenizedState,
    label: usize,
    target: &TeacherTarget,
    recons: Option<&[Mat]>,
    stats: &LatentStats,
    alpha_bar_i: f64,
    cfg: &DistillConfig,
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(Var, Stage2Terms)> {
    if label >= student.classes() {
        return Err(GazeError::Validation(format!(
            "label {label} outside {} classes",
            student.classes()
        )));
    }
    let f = student.forward_graph(g, anchor, state, dropout)?;
    if g.value(f.attention).dim() != target.attention.dim() {
        return Err(GazeError::Validation("student and teacher attention shapes differ".into()));
    }
    let le = nn::cross_entropy(g, f.logits, label);
    let ls = soft_attention_loss_graph(g, f.attention, &target.attention);
    let mut total = g.scale(le, cfg.alpha);
    let ls_w = g.scale(ls, cfg.beta);
    total = g.add(total, ls_w);
    let mut l_d = f64::NAN;
    if let Some(recons) = recons {
        let xw = whiten_graph(g, f.latent, stats);
        let ld = feature_loss_graph(g, xw, recons, alpha_bar_i)?;
        l_d = g.scalar(ld);
        if cfg.lambda > 0.0 {
            let ld_w = g.scale(ld, cfg.lambda);
            total = g.add(total, ld_w);
        }
    }
    let terms = Stage2Terms {
        l_e: g.scalar(le),
        l_s: g.scalar(ls),
        l_d,
        total: g.scalar(total),
    };
    Ok((total, terms))
}

/// Training inputs for stage 2; `train` indexes into `states`/`cells`.
pub struct Stage2Data<'a> {
    pub states: &'a [TokenizedState],
    pub cells: &'a [(usize, usize)],
    pub train: &'a [usize],
    /// Prebuilt reconstruction pools aligned with `train`; built on demand
    /// when absent and `bank_size` is set.
    pub bank: Option<&'a ReconstructionBank>,
}

/// Distills the teachers into `student` (classes = every grid cell).
///
/// `validate(student)` returns `(accuracy, MAE in degrees)` after each epoch.
pub fn train_stage2(
    student: &mut CorrNet,
    teachers: &TeacherBank,
    data: &Stage2Data<'_>,
    cfg: &DistillConfig,
    opt: &OptimizerConfig,
    seed: u64,
    mut validate: impl FnMut(&CorrNet) -> Result<(f64, f64)>,
) -> Result<DistillLog> {
    cfg.validate()?;
    teachers.validate()?;
    let grid = teachers.registry.partition.grid;
    if student.classes() != grid * grid {
        return Err(GazeError::Config(format!(
            "student has {} classes, grid has {} cells",
            student.classes(),
            grid * grid
        )));
    }
    let train_states: Vec<TokenizedState> = data.train.iter().map(|&k| data.states[k].clone()).collect();
    let train_cells: Vec<(usize, usize)> = data.train.iter().map(|&k| data.cells[k]).collect();
    let targets = teachers.targets(&train_states, &train_cells)?;
    let built;
    let bank = match (data.bank, cfg.bank_size) {
        (Some(b), _) => {
            if b.pools.len() != targets.len() || b.pools.iter().any(|p| p.len() < cfg.samples) {
                return Err(GazeError::Validation(
                    "reconstruction pools do not match the training set".into(),
                ));
            }
            Some(b)
        }
        (None, Some(r)) if teachers.denoiser.is_some() => {
            built = ReconstructionBank::build(teachers, &targets, r, seed ^ 0xba4c)?;
            Some(&built)
        }
        _ => None,
    };
    let need_fresh = bank.is_none() && cfg.lambda > 0.0;
    if need_fresh {
        teachers.denoiser()?;
    }
    let alpha_bar_i = teachers.schedule.alpha_bar(teachers.schedule.i_measure);
    let anchors = teachers.registry.states()?;

    let mut log = DistillLog::default();
    let model = student.clone();
    let mut params = std::mem::take(&mut student.params);
    let terms: std::sync::Mutex<Vec<(usize, [f64; 4])>> = std::sync::Mutex::new(Vec::new());
    let result = nn::train::run(
        "distill",
        &mut params,
        opt,
        train_states.len(),
        seed,
        |ps, idx, rng| {
            let target = &targets[idx];
            let recons: Option<Vec<Mat>> = match bank {
                Some(b) => {
                    let pool = &b.pools[idx];
                    let pick = sample_indices(rng, pool.len(), cfg.samples);
                    Some(pick.iter().map(|j| pool[j].clone()).collect())
                }
                None if need_fresh => {
                    let s: u64 = rand::Rng::random(rng);
                    Some(teachers.reconstruct(target, s, cfg.samples)?)
                }
                None => None,
            };
            let (cell_r, cell_c) = train_cells[idx];
            let mut g = Graph::new(ps);
            let (loss, t) = stage2_loss_graph(
                &mut g,
                &model,
                &anchors[target.region],
                &train_states[idx],
                cell_r * grid + cell_c,
                target,
                recons.as_deref(),
                &teachers.stats,
                alpha_bar_i,
                cfg,
                Some(rng),
            )?;
            terms
                .lock()
                .expect("terms lock")
                .push((idx, [t.l_e, t.l_s, t.l_d, t.total]));
            Ok((g.scalar(loss), g.backward(loss)))
        },
        |stats, ps| {
            let mut rows = std::mem::take(&mut *terms.lock().expect("terms lock"));
            rows.sort_by_key(|r| r.0);
            let n = rows.len().max(1) as f64;
            let mean = |k: usize| rows.iter().map(|r| r.1[k]).sum::<f64>() / n;
            let mut probe = model.clone();
            probe.params = ps.clone();
            let (val_acc, val_mae) = validate(&probe)?;
            log.epochs.push(DistillEpoch {
                epoch: stats.epoch,
                l_e: mean(0),
                l_s: mean(1),
                l_d: mean(2),
                total: mean(3),
                val_acc,
                val_mae,
            });
            log::info!(
                "distill epoch {}: total {:.4} (L_e {:.4}, L_s {:.4}, L_d {:.5}) val acc {:.3} mae {:.2}",
                stats.epoch,
                mean(3),
                mean(0),
                mean(1),
                mean(2),
                val_acc,
                val_mae
            );
            Ok(())
        },
    );
    student.params = params;
    result?;
    Ok(log)
}
