//! Monte-Carlo checks of the reverse-process algebra, reported as JSON.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{reverse_chain, NoisePredictor, NoiseSchedule, PosteriorCoefficients};
use crate::error::Result;
use crate::nn::Mat;
use crate::rng::stream_rng;

#[derive(Clone, Debug, Serialize)]
pub struct PosteriorCheck {
    pub i: usize,
    pub t: usize,
    pub samples: usize,
    pub max_mean_rel_error: f64,
    pub std_analytic: f64,
    pub std_empirical: f64,
    /// |empirical − analytic| in units of the standard error of the std.
    pub std_z: f64,
    pub pass: bool,
}

/// Simulates `(X_{t−1}, X_t)` with `X_i = x0` fixed and compares the
/// least-squares conditional mean and residual spread against the
/// closed-form reverse transition.
pub fn posterior_check(s: &NoiseSchedule, i: usize, t: usize, samples: usize, seed: u64) -> Result<PosteriorCheck> {
    let c = PosteriorCoefficients::new(s, i, t)?;
    let x0 = 1.0;
    let mut rng = stream_rng(seed, ((i as u64) << 20) | t as u64);
    let (sa, sb) = s.relative_coefficients(i, t - 1);
    let (fa, fb) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    let mut prev = Vec::with_capacity(samples);
    let mut cur = Vec::with_capacity(samples);
    for _ in 0..samples {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let xp = sa * x0 + sb * e1;
        prev.push(xp);
        cur.push(fa * xp + fb * e2);
    }
    let n = samples as f64;
    let mx = cur.iter().sum::<f64>() / n;
    let my = prev.iter().sum::<f64>() / n;
    let sxx: f64 = cur.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = cur.iter().zip(&prev).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let rss: f64 = cur
        .iter()
        .zip(&prev)
        .map(|(x, y)| (y - icpt - slope * x).powi(2))
        .sum();
    let std_empirical = (rss / (n - 2.0)).sqrt();
    let spread = (sxx / n).sqrt();
    let mut max_rel: f64 = 0.0;
    for k in [-1.0, 0.0, 1.0] {
        let xt = mx + k * spread;
        let analytic = c.coef_t * xt + c.coef_i * x0;
        let empirical = icpt + slope * xt;
        max_rel = max_rel.max(((empirical - analytic) / analytic).abs());
    }
    let std_analytic = c.std();
    let se = std_analytic / (2.0 * (n - 1.0)).sqrt();
    let std_z = if se > 0.0 {
        (std_empirical - std_analytic).abs() / se
    } else if std_empirical.abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(PosteriorCheck {
        i,
        t,
        samples,
        max_mean_rel_error: max_rel,
        std_analytic,
        std_empirical,
        std_z,
        pass: max_rel <= 0.01 && std_z <= 3.0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginalCheck {
    pub samples: usize,
    pub var_analytic: f64,
    pub var_empirical: f64,
    pub z: f64,
    pub pass: bool,
}

/// Variance of the reverse-chain initialisation for `X_i ~ N(mu, var)`.
pub fn init_marginal_check(s: &NoiseSchedule, mu: f64, var: f64, samples: usize, seed: u64) -> MarginalCheck {
    let i = s.i_measure;
    let (a, b) = s.relative_coefficients(i, s.reverse_start);
    let mut rng = stream_rng(seed, 0x696e_6974);
    let xs: Vec<f64> = (0..samples)
        .map(|_| {
            let xi = mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let m = Mat::from_elem((1, 1), xi);
            let eps = Mat::from_elem((1, 1), e);
            super::perturb(&m, i, s.reverse_start, &eps, s).expect("valid steps")[[0, 0]]
        })
        .collect();
    let n = samples as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var_empirical = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let var_analytic = a * a * var + b * b;
    let se = var_analytic * (2.0 / (n - 1.0)).sqrt();
    let z = (var_empirical - var_analytic).abs() / se;
    MarginalCheck {
        samples,
        var_analytic,
        var_empirical,
        z,
        pass: z <= 3.0,
    }
}

/// Exact noise predictor for a scalar latent prior `X_i ~ N(mean, var)`.
pub struct GaussianOracle<'a> {
    pub schedule: &'a NoiseSchedule,
    pub i: usize,
    pub mean: f64,
    pub var: f64,
}

impl NoisePredictor for GaussianOracle<'_> {
    fn predict(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        let (r, s) = self.schedule.relative_coefficients(self.i, t);
        let denom = r * r * self.var + s * s;
        Ok(x_t.mapv(|x| s * (x - r * self.mean) / denom))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconstructionCheck {
    pub runs: usize,
    pub measured: f64,
    pub mean_analytic: f64,
    pub mean_empirical: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// Runs the reverse chain with [`GaussianOracle`] and compares the mean
/// reconstruction with the closed-form conditional mean.
pub fn reconstruction_check(
    s: &NoiseSchedule,
    prior_mean: f64,
    prior_var: f64,
    measured: f64,
    runs: usize,
    seed: u64,
) -> Result<ReconstructionCheck> {
    let i = s.i_measure;
    let oracle = GaussianOracle {
        schedule: s,
        i,
        mean: prior_mean,
        var: prior_var,
    };
    let x = Mat::from_elem((1, 1), measured);
    let outs = crate::par::try_map_indexed(runs, |k| {
        let mut rng = stream_rng(seed, k as u64);
        let init = Mat::from_elem((1, 1), rng.sample(StandardNormal));
        reverse_chain(&x, i, s.reverse_start, s, &oracle, &init, |_| {
            Mat::from_elem((1, 1), rng.sample(StandardNormal))
        })
        .map(|m| m[[0, 0]])
    })?;
    let mean_empirical = outs.iter().sum::<f64>() / runs as f64;
    let r2 = s.alpha_bar(s.reverse_start) / s.alpha_bar(i);
    let gain = r2 * prior_var / (r2 * prior_var + 1.0 - r2);
    let mean_analytic = prior_mean + gain * (measured - prior_mean);
    let rel_error = ((mean_empirical - mean_analytic) / mean_analytic).abs();
    Ok(ReconstructionCheck {
        runs,
        measured,
        mean_analytic,
        mean_empirical,
        rel_error,
        pass: rel_error <= 0.02,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub steps: usize,
    pub reverse_start: usize,
    pub i_measure: usize,
    pub posterior: Vec<PosteriorCheck>,
    pub degenerate_variance_zero: bool,
    pub init_marginal: MarginalCheck,
    pub reconstruction: ReconstructionCheck,
    pub pass: bool,
}

/// Full oracle suite on the posterior grid `i ∈ {3,5,8}`, `t ∈ {i+2, i+5, T′}`.
pub fn run_suite(s: &NoiseSchedule, samples: usize, seed: u64) -> Result<VerifyReport> {
    let mut pairs = Vec::new();
    for i in [3, 5, 8] {
        for t in [i + 2, i + 5, s.reverse_start] {
            if t > i && t <= s.steps() {
                pairs.push((i, t));
            }
        }
    }
    let posterior = crate::par::try_map_indexed(pairs.len(), |k| {
        posterior_check(s, pairs[k].0, pairs[k].1, samples, seed)
    })?;
    let degenerate_variance_zero = (1..s.reverse_start)
        .all(|i| PosteriorCoefficients::new(s, i, i + 1).map(|c| c.variance == 0.0).unwrap_or(false));
    let init_marginal = init_marginal_check(s, 0.5, 2.0, 100_000, seed);
    let reconstruction = reconstruction_check(s, 1.0, 0.5, 2.0, 10_000, seed)?;
    let pass = posterior.iter().all(|p| p.pass)
        && degenerate_variance_zero
        && init_marginal.pass
        && reconstruction.pass;
    Ok(VerifyReport {
        steps: s.steps(),
        reverse_start: s.reverse_start,
        i_measure: s.i_measure,
        posterior,
        degenerate_variance_zero,
        init_marginal,
        reconstruction,
        pass,
    })
}
