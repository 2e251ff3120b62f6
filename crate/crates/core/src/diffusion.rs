//! Measurement-initialised latent denoising.
//!
//! A teacher latent is treated as an intermediate diffusion state `X_i`.
//! The denoiser is trained on re-noised copies `X_t` (t ≥ i) and reverse
//! sampling runs from `T′` back down to `i`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, CheckpointWriter};
use crate::error::{GazeError, Result};
use crate::nn::{self, Graph, Mat, OptimizerConfig, ParamId, ParamSet, Var};
use crate::rng::stream_rng;

pub mod verify;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub reverse_start: usize,
    /// Inclusive range the measurement step is drawn from during training.
    pub i_range: [usize; 2],
    /// Measurement step used when sampling reconstructions.
    pub i_measure: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            reverse_start: 100,
            i_range: [27, 32],
            i_measure: 30,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = build_schedule(self.steps, self.beta_start, self.beta_end, self.reverse_start)?;
        s.with_i_range(self.i_range, self.i_measure)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `betas[t - 1]` is β_t.
    betas: Vec<f64>,
    /// `alpha_bar[t]` is ᾱ_t with ᾱ_0 = 1.
    alpha_bar: Vec<f64>,
    pub reverse_start: usize,
    pub i_range: [usize; 2],
    pub i_measure: usize,
}

/// Linear β ramp from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    reverse_start: usize,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(GazeError::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(GazeError::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, reverse_start)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, reverse_start: usize) -> Result<Self> {
        if betas.is_empty() {
            return Err(GazeError::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(GazeError::Config(format!("beta {b} outside (0, 1)")));
        }
        if reverse_start > betas.len() {
            return Err(GazeError::Config(format!(
                "reverse start {reverse_start} exceeds {} steps",
                betas.len()
            )));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        let lo = reverse_start.min(1);
        Ok(Self {
            betas,
            alpha_bar,
            reverse_start,
            i_range: [lo, lo],
            i_measure: lo,
        })
    }

    pub fn with_i_range(mut self, range: [usize; 2], measure: usize) -> Result<Self> {
        if range[0] == 0 || range[0] > range[1] || range[1] > self.reverse_start {
            return Err(GazeError::Config(format!(
                "i range {range:?} must satisfy 1 <= lo <= hi <= T' = {}",
                self.reverse_start
            )));
        }
        if measure == 0 || measure > self.reverse_start {
            return Err(GazeError::Config(format!(
                "measurement step {measure} must lie in [1, {}]",
                self.reverse_start
            )));
        }
        self.i_range = range;
        self.i_measure = measure;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(GazeError::Config(format!(
                "step {t} beyond schedule length {}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(√(ᾱ_t/ᾱ_i), √(1 − ᾱ_t/ᾱ_i))`.
    pub fn relative_coefficients(&self, i: usize, t: usize) -> (f64, f64) {
        let r = self.alpha_bar(t) / self.alpha_bar(i);
        (r.sqrt(), (1.0 - r).max(0.0).sqrt())
    }
}

/// `X_t = √(ᾱ_t/ᾱ_i)·X_i + √(1 − ᾱ_t/ᾱ_i)·ε`.
pub fn perturb(x_i: &Mat, i: usize, t: usize, eps: &Mat, s: &NoiseSchedule) -> Result<Mat> {
    s.check_step(t)?;
    if t < i {
        return Err(GazeError::Validation(format!("perturb needs t >= i, got t={t}, i={i}")));
    }
    if x_i.dim() != eps.dim() {
        return Err(GazeError::Validation(format!(
            "latent {:?} vs noise {:?}",
            x_i.dim(),
            eps.dim()
        )));
    }
    let (a, b) = s.relative_coefficients(i, t);
    Ok(x_i * a + eps * b)
}

/// Coefficients of the reverse transition `X_{t−1} | X_t, X_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub coef_t: f64,
    pub coef_i: f64,
    pub variance: f64,
}

impl PosteriorCoefficients {
    pub fn new(s: &NoiseSchedule, i: usize, t: usize) -> Result<Self> {
        s.check_step(t)?;
        if t <= i {
            return Err(GazeError::Validation(format!(
                "posterior needs t > i, got t={t}, i={i}"
            )));
        }
        let (ai, at, ap) = (s.alpha_bar(i), s.alpha_bar(t), s.alpha_bar(t - 1));
        let denom = ai - at;
        let gap = if t - 1 == i { 0.0 } else { ai - ap };
        Ok(Self {
            coef_t: gap * s.alpha(t).sqrt() / denom,
            coef_i: s.beta(t) * (ai * ap).sqrt() / denom,
            variance: s.beta(t) * gap / denom,
        })
    }

    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// Mean and standard deviation of `X_{t−1}` given `X_t` and `X_i`.
pub fn posterior_params(
    x_t: &Mat,
    x_i: &Mat,
    t: usize,
    i: usize,
    s: &NoiseSchedule,
) -> Result<(Mat, f64)> {
    let c = PosteriorCoefficients::new(s, i, t)?;
    if x_t.dim() != x_i.dim() {
        return Err(GazeError::Validation("posterior inputs differ in shape".into()));
    }
    Ok((x_t * c.coef_t + x_i * c.coef_i, c.std()))
}

/// `(mean δ)² + (std δ − √2)²` with the population standard deviation.
pub fn moment_loss(delta: &Mat) -> f64 {
    let n = delta.len() as f64;
    let mean = delta.sum() / n;
    let var = delta.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    // (σ − √2)² expanded as σ² − 2√2σ + 2 so the targets are hit exactly.
    let spread = (var - 2.0 * std::f64::consts::SQRT_2 * var.sqrt() + 2.0).max(0.0);
    mean * mean + spread
}

/// Sinusoidal embedding of a timestep, `1 × width`.
pub fn timestep_embedding(t: usize, width: usize) -> Mat {
    let half = width / 2;
    let mut e = Mat::zeros((1, width));
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        e[[0, k]] = a.sin();
        e[[0, half + k]] = a.cos();
    }
    e
}

/// Anything that predicts the noise in `X_t`.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    ln_g: ParamId,
    ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    wt: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token-wise residual MLP with a timestep embedding added in every block.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub channels: usize,
    pub params: ParamSet,
    w_in: ParamId,
    b_in: ParamId,
    blocks: Vec<ResBlock>,
    ln_g: ParamId,
    ln_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, channels: usize, seed: u64) -> Result<Self> {
        if config.width < 2 || config.blocks == 0 || channels == 0 {
            return Err(GazeError::Config(
                "denoiser width >= 2, blocks >= 1 and channels >= 1 required".into(),
            ));
        }
        let mut rng = stream_rng(seed, 0x6469_6666);
        let mut ps = ParamSet::new();
        let w = config.width;
        let w_in = ps.add_linear("den.w_in", channels, w, &mut rng);
        let b_in = ps.add_zeros("den.b_in", 1, w);
        let blocks = (0..config.blocks)
            .map(|k| ResBlock {
                ln_g: ps.add(format!("den.block{k}.ln_g"), Mat::ones((1, w))),
                ln_b: ps.add_zeros(format!("den.block{k}.ln_b"), 1, w),
                w1: ps.add_linear(format!("den.block{k}.w1"), w, w, &mut rng),
                b1: ps.add_zeros(format!("den.block{k}.b1"), 1, w),
                wt: ps.add_linear(format!("den.block{k}.wt"), w, w, &mut rng),
                w2: ps.add_linear(format!("den.block{k}.w2"), w, w, &mut rng),
                b2: ps.add_zeros(format!("den.block{k}.b2"), 1, w),
            })
            .collect();
        let ln_g = ps.add("den.ln_g", Mat::ones((1, w)));
        let ln_b = ps.add_zeros("den.ln_b", 1, w);
        let w_out = ps.add_linear("den.w_out", w, channels, &mut rng);
        let b_out = ps.add_zeros("den.b_out", 1, channels);
        Ok(Self {
            config,
            channels,
            params: ps,
            w_in,
            b_in,
            blocks,
            ln_g,
            ln_b,
            w_out,
            b_out,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, x_t: Var, t: usize) -> Var {
        let temb = g.constant(timestep_embedding(t, self.config.width));
        let mut h = nn::linear(g, x_t, self.w_in, self.b_in);
        for b in &self.blocks {
            let u = nn::layer_norm(g, h, b.ln_g, b.ln_b);
            let u = nn::linear(g, u, b.w1, b.b1);
            let wt = g.param(b.wt);
            let te = g.matmul(temb, wt);
            let u = g.add(u, te);
            let u = g.gelu(u);
            let u = nn::linear(g, u, b.w2, b.b2);
            h = g.add(h, u);
        }
        let h = nn::layer_norm(g, h, self.ln_g, self.ln_b);
        nn::linear(g, h, self.w_out, self.b_out)
    }

    /// Loss graph for one item with caller-fixed `i`, `t` and `ε`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        x_i: &Mat,
        i: usize,
        t: usize,
        eps: &Mat,
        s: &NoiseSchedule,
    ) -> Result<Var> {
        let x_t = perturb(x_i, i, t, eps, s)?;
        let xv = g.constant(x_t);
        let pred = self.forward_graph(g, xv, t);
        let e = g.constant(eps.clone());
        let delta = g.sub(e, pred);
        let mean = g.mean_all(delta);
        let mean_sq = g.square(mean);
        let centred = g.sub(delta, mean);
        let sq = g.square(centred);
        let var = g.mean_all(sq);
        let std = g.sqrt(var);
        let dev = g.add_scalar(std, -std::f64::consts::SQRT_2);
        let dev_sq = g.square(dev);
        Ok(g.add(mean_sq, dev_sq))
    }

    pub fn save(&self, path: &Path, schedule: &ScheduleConfig, seed: u64, epoch: usize) -> Result<()> {
        CheckpointWriter {
            kind: "denoiser",
            seed,
            epoch,
            config: serde_json::json!({
                "denoiser": self.config,
                "channels": self.channels,
                "schedule": schedule,
            }),
            extra: serde_json::Value::Null,
        }
        .write_params(path, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, ScheduleConfig)> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind("denoiser")?;
        let c = &ck.header.config;
        let bad = |e: serde_json::Error| GazeError::Validation(format!("denoiser config: {e}"));
        let config: DenoiserConfig = serde_json::from_value(c["denoiser"].clone()).map_err(bad)?;
        let channels: usize = serde_json::from_value(c["channels"].clone()).map_err(bad)?;
        let schedule: ScheduleConfig = serde_json::from_value(c["schedule"].clone()).map_err(bad)?;
        let mut d = Self::new(config, channels, ck.header.seed)?;
        crate::corrnet::copy_params_by_name(&mut d.params, &ck.to_params())?;
        Ok((d, schedule))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        if x_t.ncols() != self.channels {
            return Err(GazeError::Validation(format!(
                "denoiser expects {} channels, got {}",
                self.channels,
                x_t.ncols()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(x_t.clone());
        let y = self.forward_graph(&mut g, x, t);
        Ok(g.value(y).clone())
    }
}

pub fn standard_normal(rng: &mut impl Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Draws `i ~ U{i_lo..=i_hi}`, `t ~ U{i..=T}` and `ε`, and evaluates the
/// moment loss with its gradient.
pub fn denoiser_loss(
    den: &Denoiser,
    params: &ParamSet,
    x_i: &Mat,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, nn::Gradients)> {
    let i = rng.random_range(s.i_range[0]..=s.i_range[1]);
    let t = rng.random_range(i..=s.steps());
    let eps = standard_normal(rng, x_i.dim());
    let mut g = Graph::new(params);
    let l = den.loss_graph(&mut g, x_i, i, t, &eps, s)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(GazeError::numeric("denoiser_loss", t, format!("loss {v}")));
    }
    Ok((v, g.backward(l)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLog {
    pub epochs: Vec<DenoiserEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: f64,
}

/// Mean loss over `latents` with a fixed draw per item.
pub fn evaluate_denoiser(den: &Denoiser, latents: &[Mat], s: &NoiseSchedule, seed: u64) -> Result<f64> {
    if latents.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = crate::par::try_map_indexed(latents.len(), |k| {
        let mut rng = stream_rng(seed, k as u64);
        denoiser_loss(den, &den.params, &latents[k], s, &mut rng).map(|(l, _)| l)
    })?;
    Ok(losses.iter().sum::<f64>() / latents.len() as f64)
}

/// Trains the denoiser on whitened teacher latents.
pub fn train_denoiser(
    den: &mut Denoiser,
    train: &[Mat],
    val: &[Mat],
    s: &NoiseSchedule,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<DenoiserLog> {
    let mut log = DenoiserLog::default();
    let model = den.clone();
    let mut params = std::mem::take(&mut den.params);
    nn::train::run(
        "denoiser",
        &mut params,
        opt,
        train.len(),
        seed,
        |ps, idx, rng| denoiser_loss(&model, ps, &train[idx], s, rng),
        |stats, ps| {
            let mut probe = model.clone();
            probe.params = ps.clone();
            log.epochs.push(DenoiserEpoch {
                epoch: stats.epoch,
                lr: stats.lr,
                loss: stats.mean_loss,
                val_loss: evaluate_denoiser(&probe, val, s, seed ^ 0x5eed)?,
            });
            Ok(())
        },
    )?;
    den.params = params;
    Ok(log)
}

/// Runs the reverse chain once from `X_{T′}` down to `X_i`.
///
/// `init_noise` is the ε used to form `X_{T′}`; `step_noise(t)` supplies
/// `z` for the transition out of step `t`.
pub fn reverse_chain<P: NoisePredictor + ?Sized>(
    x_i: &Mat,
    i: usize,
    t_start: usize,
    s: &NoiseSchedule,
    model: &P,
    init_noise: &Mat,
    mut step_noise: impl FnMut(usize) -> Mat,
) -> Result<Mat> {
    s.check_step(t_start)?;
    if t_start < i {
        return Err(GazeError::Validation(format!(
            "reverse start {t_start} is below the measurement step {i}"
        )));
    }
    let mut x = perturb(x_i, i, t_start, init_noise, s)?;
    let ai = s.alpha_bar(i);
    for t in (i + 1..=t_start).rev() {
        let eps = model.predict(&x, t)?;
        let at = s.alpha_bar(t);
        let k = s.beta(t) * ai.sqrt() / (ai - at).sqrt();
        let mut next = (&x - &(eps * k)) / s.alpha(t).sqrt();
        if t > i + 1 {
            let sigma = PosteriorCoefficients::new(s, i, t)?.std();
            let z = step_noise(t);
            next = next + z * sigma;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GazeError::numeric("reverse_sample", t, "non-finite state"));
        }
        x = next;
    }
    Ok(x)
}

/// `S` reconstructions of the measured latent `x_i`. Reconstruction `k` uses
/// the random stream `(base_seed, k)`, so results do not depend on
/// scheduling.
pub fn reverse_sample<P: NoisePredictor + ?Sized>(
    x_i: &Mat,
    s: &NoiseSchedule,
    model: &P,
    base_seed: u64,
    samples: usize,
) -> Result<Vec<Mat>> {
    if samples == 0 {
        return Err(GazeError::Config("reverse sampling needs S >= 1".into()));
    }
    let i = s.i_measure;
    let start = s.reverse_start;
    crate::par::try_map_indexed(samples, |k| {
        let mut rng = stream_rng(base_seed, k as u64);
        let init = standard_normal(&mut rng, x_i.dim());
        reverse_chain(x_i, i, start, s, model, &init, |_| standard_normal(&mut rng, x_i.dim()))
    })
}

/// Per-channel whitening statistics fitted on a set of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub const MIN_STD: f64 = 1e-6;

    /// Statistics over every token row of every latent.
    pub fn fit(latents: &[Mat]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| GazeError::Validation("no latents to fit statistics on".into()))?;
        let d = first.ncols();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for l in latents {
            if l.ncols() != d {
                return Err(GazeError::Validation("latents differ in channel count".into()));
            }
            for row in l.rows() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            n += l.nrows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for l in latents {
            for row in l.rows() {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / n as f64).sqrt().max(Self::MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn whiten(&self, x: &Mat) -> Mat {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        y
    }

    pub fn unwhiten(&self, x: &Mat) -> Mat {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use rand::SeedableRng;

    #[test]
    fn hand_product_schedule() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4], 4).unwrap();
        assert!((s.alpha_bar(4) - 0.3024).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_beta_is_geometric() {
        let s = build_schedule(50, 0.03, 0.03, 50).unwrap();
        for t in 0..=50 {
            assert!((s.alpha_bar(t) - 0.97f64.powi(t as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = ScheduleConfig::default().build().unwrap();
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        for i in s.i_range[0]..=s.i_range[1] {
            assert!(s.alpha_bar(s.reverse_start) < s.alpha_bar(i));
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(build_schedule(10, 0.0, 0.1, 5).is_err());
        assert!(build_schedule(10, 0.2, 0.1, 5).is_err());
        assert!(build_schedule(10, 0.1, 1.0, 5).is_err());
        assert!(build_schedule(10, 0.1, 0.2, 11).is_err());
        let s = build_schedule(100, 1e-4, 0.02, 40).unwrap();
        assert!(s.clone().with_i_range([27, 41], 30).is_err());
        assert!(s.with_i_range([27, 32], 30).is_ok());
    }

    #[test]
    fn perturb_edge_cases() {
        let s = build_schedule(100, 1e-4, 0.02, 100).unwrap();
        let x = ndarray::array![[0.3, -1.2], [2.0, 0.5]];
        let eps = ndarray::array![[1.0, 0.4], [-0.7, 0.1]];
        assert_eq!(perturb(&x, 30, 30, &eps, &s).unwrap(), x);
        let zero = Mat::zeros((2, 2));
        let r = (s.alpha_bar(60) / s.alpha_bar(30)).sqrt();
        let y = perturb(&x, 30, 60, &zero, &s).unwrap();
        assert!((y[[1, 0]] - 2.0 * r).abs() < 1e-15);
        assert!(perturb(&x, 30, 29, &eps, &s).is_err());
    }

    #[test]
    fn degenerate_variance_at_first_step() {
        let s = build_schedule(100, 1e-4, 0.02, 100).unwrap();
        for i in 1..60 {
            let c = PosteriorCoefficients::new(&s, i, i + 1).unwrap();
            assert_eq!(c.variance, 0.0);
            assert_eq!(c.coef_t, 0.0);
            // pinned to X_i: β√(ᾱ_i ᾱ_i)/(ᾱ_i − ᾱ_i α) = 1
            assert!((c.coef_i - 1.0).abs() < 1e-9);
            let c2 = PosteriorCoefficients::new(&s, i, i + 2).unwrap();
            assert!(c2.variance > 0.0);
        }
        assert!(PosteriorCoefficients::new(&s, 5, 5).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_mean() {
        let s = build_schedule(40, 1e-4, 0.02, 40).unwrap();
        let z = Mat::zeros((3, 2));
        let (m, sd) = posterior_params(&z, &z, 12, 5, &s).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert!(sd > 0.0);
    }

    #[test]
    fn posterior_matches_regression_oracle() {
        // X_{t-1} from the bridge marginal, X_t from one forward step, then
        // regress X_{t-1} on X_t.
        let s = build_schedule(40, 1e-4, 0.02, 40).unwrap();
        let (i, t) = (5, 12);
        let x0 = 0.8;
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (sa, sb) = s.relative_coefficients(i, t - 1);
        let mut prev = Vec::with_capacity(n);
        let mut cur = Vec::with_capacity(n);
        for _ in 0..n {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let xp = sa * x0 + sb * e1;
            prev.push(xp);
            cur.push(s.alpha(t).sqrt() * xp + s.beta(t).sqrt() * e2);
        }
        let mx = cur.iter().sum::<f64>() / n as f64;
        let my = prev.iter().sum::<f64>() / n as f64;
        let sxy: f64 = cur.iter().zip(&prev).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = cur.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        let icpt = my - slope * mx;
        let resid: f64 = cur
            .iter()
            .zip(&prev)
            .map(|(x, y)| (y - icpt - slope * x).powi(2))
            .sum::<f64>()
            / (n - 2) as f64;
        for xt in [mx - 0.1, mx, mx + 0.1] {
            let (m, sd) = posterior_params(
                &Mat::from_elem((1, 1), xt),
                &Mat::from_elem((1, 1), x0),
                t,
                i,
                &s,
            )
            .unwrap();
            let emp = icpt + slope * xt;
            assert!(((m[[0, 0]] - emp) / emp).abs() < 0.01, "{} vs {emp}", m[[0, 0]]);
            assert!(((sd - resid.sqrt()) / sd).abs() < 0.01);
        }
    }

    #[test]
    fn moment_loss_targets() {
        assert_eq!(moment_loss(&Mat::zeros((4, 3))), 2.0);
        let d = ndarray::array![[std::f64::consts::SQRT_2, -std::f64::consts::SQRT_2]];
        assert_eq!(moment_loss(&d), 0.0);
    }

    #[test]
    fn loss_graph_matches_plain_loss() {
        let s = build_schedule(100, 1e-4, 0.02, 40).unwrap();
        let den = Denoiser::new(DenoiserConfig { width: 8, blocks: 2 }, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = standard_normal(&mut rng, (5, 3));
        let eps = standard_normal(&mut rng, (5, 3));
        let mut g = Graph::new(&den.params);
        let l = den.loss_graph(&mut g, &x, 28, 50, &eps, &s).unwrap();
        let pred = den.predict(&perturb(&x, 28, 50, &eps, &s).unwrap(), 50).unwrap();
        assert!((g.scalar(l) - moment_loss(&(&eps - &pred))).abs() < 1e-12);
    }

    #[test]
    fn denoiser_loss_gradients_match_finite_differences() {
        let s = build_schedule(100, 1e-4, 0.02, 40).unwrap();
        let mut den = Denoiser::new(DenoiserConfig { width: 8, blocks: 2 }, 3, 3).unwrap();
        assert!(den.params.num_scalars() <= 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standard_normal(&mut rng, (4, 3));
        let eps = standard_normal(&mut rng, (4, 3));
        let model = den.clone();
        let report = check_param_gradients(
            &mut den.params,
            |ps| {
                let mut g = Graph::new(ps);
                let l = model.loss_graph(&mut g, &x, 29, 70, &eps, &s).unwrap();
                (g.scalar(l), g.backward(l))
            },
            1e-4,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn empty_reverse_loop_returns_measurement() {
        let s = build_schedule(100, 1e-4, 0.02, 30).unwrap();
        let x = ndarray::array![[0.5, -0.25]];
        let den = Denoiser::new(DenoiserConfig { width: 4, blocks: 1 }, 2, 0).unwrap();
        let out = reverse_chain(&x, 30, 30, &s, &den, &Mat::zeros((1, 2)), |_| unreachable!()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn reverse_sampling_is_reproducible() {
        let s = ScheduleConfig {
            steps: 100,
            reverse_start: 40,
            ..ScheduleConfig::default()
        }
        .build()
        .unwrap();
        let den = Denoiser::new(DenoiserConfig { width: 8, blocks: 2 }, 2, 5).unwrap();
        let x = ndarray::array![[0.5, -0.25], [1.0, 0.0]];
        let a = reverse_sample(&x, &s, &den, 77, 4).unwrap();
        let b = reverse_sample(&x, &s, &den, 77, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let c = reverse_sample(&x, &s, &den, 77, 2).unwrap();
        assert_eq!(&a[..2], &c[..]);
    }

    #[test]
    fn whitening_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat: Vec<Mat> = (0..20)
            .map(|_| standard_normal(&mut rng, (6, 3)) * 4.0 + 2.5)
            .collect();
        let st = LatentStats::fit(&lat).unwrap();
        let w: Vec<Mat> = lat.iter().map(|l| st.whiten(l)).collect();
        let st2 = LatentStats::fit(&w).unwrap();
        for c in 0..3 {
            assert!(st2.mean[c].abs() < 1e-12);
            assert!((st2.std[c] - 1.0).abs() < 1e-12);
        }
        let back = st.unwhiten(&w[3]);
        assert!((back - &lat[3]).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn denoiser_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("den.json");
        let den = Denoiser::new(DenoiserConfig { width: 6, blocks: 2 }, 3, 8).unwrap();
        let sc = ScheduleConfig::default();
        den.save(&p, &sc, 8, 1).unwrap();
        let (back, sc2) = Denoiser::load(&p).unwrap();
        assert_eq!(back, den);
        assert_eq!(sc2, sc);
    }
}
